/* Build: cc smoke.c -I../include ../../../target/debug/libnesslsi_ffi.a -lpthread -ldl -lm */
#include <math.h>
#include <stdio.h>

#include "nesslsi.h"

int main(void) {
    NlsiEllipticInputs in = {0.0, 1.0, 0.0, 1.0, 1, 1.0, 0.0, 0};
    NlsiConstants c;
    if (nlsi_constants_compute(&in, &c) != NLSI_STATUS_OK) {
        fprintf(stderr, "constants: %s\n", nlsi_last_error_message());
        return 1;
    }
    printf("A=%.12f B=%.12f C=%.12f C_LS=%.12f\n", c.a, c.b, c.c, c.c_ls);

    double k = 1.0;
    NlsiMetric *m = NULL;
    if (nlsi_metric_new(&k, 1, 0.0, 0.0, 1.0, 1e-10, 0, 0, &m) != NLSI_STATUS_OK) {
        fprintf(stderr, "metric: %s\n", nlsi_last_error_message());
        return 1;
    }
    NlsiMetricScalars s;
    nlsi_metric_scalars(m, &s);
    double z[2] = {0.3, -0.2}, zp[2] = {-0.1, 0.4}, rho = 0.0;
    nlsi_metric_rho(m, z, zp, 2, &rho);
    printf("kappa2=%.12f r0=%.12f rho=%.12f\n", s.kappa2, s.r0, rho);
    nlsi_metric_free(m);

    if (nlsi_metric_rho(NULL, z, zp, 2, &rho) != NLSI_STATUS_NULL_POINTER) {
        return 1;
    }
    printf("error=%s\n", nlsi_last_error_message());
    return fabs(c.a - 12.0) < 1e-12 ? 0 : 1;
}
