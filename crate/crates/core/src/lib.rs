//! Security gateway for service-oriented e-commerce.
//!
//! Requests pass a fixed pipeline before reaching a business service:
//! ban check, certificate verification, replay suppression, rate-based
//! intrusion detection and input sanitization. Business services reach
//! their encrypted record store only through a quarantine link that is
//! severed when the intrusion detector raises a critical alert.

pub mod envelope;
pub mod filter;
pub mod gateway;
pub mod harness;
pub mod ids;
pub mod ims;
pub mod quarantine;
pub mod store;

pub use envelope::{decode, encode, ServiceRequest, ServiceResponse, Stage, ThreatClass, Verdict};

pub use gateway::{Gateway, GatewayConfig};
