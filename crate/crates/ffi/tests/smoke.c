/* Links against the static library and exercises the header from C. */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "savid.h"

#define CHECK(cond)                                                          \
    do {                                                                     \
        if (!(cond)) {                                                       \
            const char *e = savid_last_error();                              \
            fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond, e ? e : ""); \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(void) {
    SavidBox a = {{0, 0, 0}, {4, 2, 1.5}, 0, 0, 0.9};
    SavidBox b = {{2, 0, 0}, {4, 2, 1.5}, 0, 0, 0.8};
    double iou = 0;
    CHECK(savid_bev_iou(&a, &b, &iou) == SAVID_STATUS_OK);
    CHECK(fabs(iou - 1.0 / 3.0) < 1e-12);

    double rce = 0;
    CHECK(savid_rce(0.0, 0.5, &rce) == SAVID_STATUS_INVALID_ARGUMENT);
    CHECK(savid_last_error() != NULL);

    SavidConfig *cfg = NULL;
    CHECK(savid_config_from_toml("channels = 8\nheads = 2\nwindow = 3\nheight = 12\nwidth = 12\n"
                                 "keypoints = 16\nsequence_length = 1\n",
                                 &cfg) == SAVID_STATUS_OK);
    SavidScene *scene = NULL;
    CHECK(savid_scene_generate(cfg, 1, 1, &scene) == SAVID_STATUS_OK);
    SavidForward *fwd = NULL;
    CHECK(savid_forward(cfg, scene, &fwd) == SAVID_STATUS_OK);
    size_t len = 0;
    CHECK(savid_forward_features(fwd, 0, SAVID_FEATURE_REFINED, NULL, 0, &len) == SAVID_STATUS_BUFFER_TOO_SMALL);
    double *f = malloc(len * sizeof(double));
    CHECK(savid_forward_features(fwd, 0, SAVID_FEATURE_REFINED, f, len, &len) == SAVID_STATUS_OK);
    CHECK(len == 12 * 12 * 8 && isfinite(f[len - 1]));
    free(f);
    savid_forward_free(fwd);
    savid_scene_free(scene);
    savid_config_free(cfg);
    printf("ok %s\n", savid_version());
    return 0;
}
