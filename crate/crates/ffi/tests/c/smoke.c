#include <stdio.h>
#include <string.h>
#include "voxdistill.h"

int main(void) {
    uintptr_t dims[3] = {3, 3, 3};
    double spacing[3] = {1.0, 1.0, 1.0};
    uint8_t mask[27] = {0};
    double sdm[27];
    double dice = 0.0, jaccard = 0.0;
    char msg[256];

    mask[13] = 1;
    if (vxd_signed_distance_map(mask, dims, spacing, sdm) != VXD_STATUS_OK) return 1;
    if (sdm[13] != -1.0 || sdm[0] != 1.0) return 2;
    if (vxd_dice_jaccard(mask, mask, dims, &dice, &jaccard) != VXD_STATUS_OK) return 3;
    if (dice != 100.0 || jaccard != 100.0) return 4;

    memset(mask, 0, sizeof mask);
    double asd, hd;
    if (vxd_surface_distances(mask, mask, dims, spacing, &asd, &hd) != VXD_STATUS_INVALID_INPUT) return 5;
    if (vxd_last_error_message(msg, sizeof msg) == 0) return 6;
    if (vxd_signed_distance_map(NULL, dims, spacing, sdm) != VXD_STATUS_NULL_POINTER) return 7;

    printf("voxdistill %s ok\n", vxd_version());
    return 0;
}
