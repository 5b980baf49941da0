#include <stdio.h>
#include <string.h>
#include "soaguard.h"

#define CHECK(expr)                                                        \
    do {                                                                   \
        SgStatus s_ = (expr);                                              \
        if (s_ != SG_STATUS_OK) {                                          \
            const char *e_ = sg_last_error();                              \
            fprintf(stderr, "%s: %d %s\n", #expr, s_, e_ ? e_ : "");      \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke DIR\n");
        return 2;
    }
    const uint64_t now = 1700000000ULL;
    char *config = NULL, *token = NULL, *env = NULL, *json = NULL, *status = NULL;
    SgGateway *gw = NULL;

    CHECK(sg_provision(argv[1], "c-admin", &config));
    CHECK(sg_gateway_open(config, now, &gw));
    CHECK(sg_gateway_authenticate(gw, "alice", "alice-password", 0x0a000001u, now, &token));
    CHECK(sg_encode_request("alice", "insurance", "quote", "declared_value=200", token, 0x0a000001u, now, &env));
    CHECK(sg_gateway_handle(gw, (const uint8_t *)env, strlen(env), 0x0a000001u, 40000, now * 1000000ULL, &json));
    printf("%s\n", json);

    if (sg_gateway_admin(gw, "status", "wrong", NULL, now, &status) != SG_STATUS_UNAUTHORIZED) {
        fprintf(stderr, "bad token accepted\n");
        return 1;
    }
    CHECK(sg_gateway_admin(gw, "status", "c-admin", NULL, now, &status));
    printf("%s\n", status);

    sg_string_free(status);
    sg_string_free(json);
    sg_string_free(env);
    sg_string_free(token);
    sg_string_free(config);
    sg_gateway_free(gw);
    return 0;
}
