#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include "spme_doe.h"

static int fail(const char *what, SpmeDoeStatus s) {
    char msg[512];
    spme_doe_last_error(msg, sizeof msg);
    fprintf(stderr, "%s failed with %d: %s\n", what, (int)s, msg);
    return 1;
}

int main(void) {
    SpmeDoeConfig *cfg = NULL;
    SpmeDoeStatus s = spme_doe_config_builtin(&cfg);
    if (s != SPME_DOE_STATUS_OK) return fail("builtin", s);

    double inputs[20] = {0};
    double volts[20];
    s = spme_doe_simulate(cfg, SPME_DOE_PARAMS_TRUTH, inputs, 20, volts);
    if (s != SPME_DOE_STATUS_OK) return fail("simulate", s);
    for (int k = 1; k < 20; k++) {
        if (fabs(volts[k] - volts[0]) > 1e-9) {
            fprintf(stderr, "rest voltage drifts at sample %d\n", k);
            return 1;
        }
    }

    s = spme_doe_simulate(cfg, SPME_DOE_PARAMS_TRUTH, NULL, 20, volts);
    if (s != SPME_DOE_STATUS_NULL_POINTER) return fail("null check", s);
    if (spme_doe_last_error(NULL, 0) == 0) return fail("error message", s);

    SpmeDoeConfig *bad = NULL;
    s = spme_doe_config_parse("[cell]\nx = = 1\n", "inline.toml", &bad);
    if (s != SPME_DOE_STATUS_CONFIG || bad != NULL) return fail("parse error", s);

    printf("ok %s %.6f\n", spme_doe_version(), volts[0]);
    spme_doe_config_free(cfg);
    return 0;
}
