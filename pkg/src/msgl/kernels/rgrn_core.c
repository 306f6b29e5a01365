#include <math.h>
#include <string.h>

#include "rgrn_core.h"

/* row-major C[m, n] = op(A) @ op(B) + beta * C through column-major dgemm */
static void mm(msgl_dgemm_fn gemm, int ta, int tb, int m, int n, int k,
               const double *A, int lda, const double *B, int ldb, double beta,
               double *C, int ldc)
{
    char transa = tb ? 'T' : 'N';
    char transb = ta ? 'T' : 'N';
    double alpha = 1.0;
    gemm(&transa, &transb, &n, &m, &k, &alpha, (double *)B, &ldb, (double *)A,
         &lda, &beta, C, &ldc);
}

void msgl_rgrn_forward(msgl_dgemm_fn gemm, int T, int n, int h,
                       const double *Zx, const double *A, const double *Wh,
                       const double *b, const double *Wg, const double *bg,
                       const double *R, double *G, double *Q, double *M,
                       double *S, double *Hd, double *H, double *hd)
{
    const int h4 = 4 * h;
    const long nh = (long)n * h, nh4 = (long)n * h4;
    memset(hd, 0, sizeof(double) * nh);
    memset(S, 0, sizeof(double) * nh);
    for (int t = 0; t < T; t++) {
        double *g = G + t * nh4;
        double *q = Q + t * nh;
        double *mt = M + t * nh;
        const double *s_prev = S + t * nh;
        double *s = S + (t + 1) * nh;
        double *ht = H + t * nh;
        const double *zx = Zx + t * nh4;

        memcpy(Hd + t * nh, hd, sizeof(double) * nh);
        for (int r = 0; r < n; r++) {
            double *gr = g + (long)r * h4;
            const double *zr = zx + (long)r * h4;
            for (int c = 0; c < h4; c++)
                gr[c] = zr[c] + b[c];
            double *qr = q + (long)r * h;
            for (int c = 0; c < h; c++)
                qr[c] = bg[c];
        }
        mm(gemm, 0, 0, n, h4, h, hd, h, Wh, h4, 1.0, g, h4);
        mm(gemm, 0, 0, n, h, h, s_prev, h, Wg, h, 1.0, q, h);
        for (long k = 0; k < nh; k++) {
            q[k] = tanh(q[k]);
            mt[k] = s_prev[k];
        }
        mm(gemm, 0, 0, n, h, n, A, n, q, h, 1.0, mt, h);
        for (int r = 0; r < n; r++) {
            double *gr = g + (long)r * h4;
            for (int c = 0; c < 3 * h; c++)
                gr[c] = 0.5 * tanh(0.5 * gr[c]) + 0.5;
            for (int c = 3 * h; c < h4; c++)
                gr[c] = tanh(gr[c]);
            const double *mr = mt + (long)r * h;
            double *sr = s + (long)r * h;
            double *hr = ht + (long)r * h;
            for (int c = 0; c < h; c++)
                sr[c] = gr[h + c] * mr[c] + gr[c] * gr[3 * h + c];
            for (int c = 0; c < h; c++)
                hr[c] = gr[2 * h + c] * tanh(sr[c]);
        }
        if (R) {
            for (long k = 0; k < nh; k++)
                hd[k] = ht[k] * R[k];
        } else {
            memcpy(hd, ht, sizeof(double) * nh);
        }
    }
}

void msgl_rgrn_backward(msgl_dgemm_fn gemm, int T, int n, int h,
                        const double *A, const double *Wh, const double *Wg,
                        const double *R, const double *G, const double *Q,
                        const double *M, const double *S, const double *dH,
                        double *DZ, double *DQ, double *dh_carry,
                        double *ds_carry, double *dm)
{
    const int h4 = 4 * h;
    const long nh = (long)n * h, nh4 = (long)n * h4;
    memset(dh_carry, 0, sizeof(double) * nh);
    memset(ds_carry, 0, sizeof(double) * nh);
    for (int t = T - 1; t >= 0; t--) {
        const double *g = G + t * nh4;
        const double *s = S + (t + 1) * nh;
        const double *mt = M + t * nh;
        const double *dht = dH + t * nh;
        const double *q = Q + t * nh;
        double *dz = DZ + t * nh4;
        double *dq = DQ + t * nh;
        for (int r = 0; r < n; r++) {
            const double *gr = g + (long)r * h4;
            const double *sr = s + (long)r * h;
            const double *mr = mt + (long)r * h;
            const double *dhr = dht + (long)r * h;
            const double *hcr = dh_carry + (long)r * h;
            const double *scr = ds_carry + (long)r * h;
            double *dzr = dz + (long)r * h4;
            double *dmr = dm + (long)r * h;
            for (int c = 0; c < h; c++) {
                double ts = tanh(sr[c]);
                double dh = dhr[c] + hcr[c];
                double og = gr[2 * h + c];
                double ds = scr[c] + dh * og * (1.0 - ts * ts);
                double ig = gr[c], fg = gr[h + c], cg = gr[3 * h + c];
                dzr[c] = ds * cg * ig * (1.0 - ig);
                dzr[h + c] = ds * mr[c] * fg * (1.0 - fg);
                dzr[2 * h + c] = dh * ts * og * (1.0 - og);
                dzr[3 * h + c] = ds * ig * (1.0 - cg * cg);
                dmr[c] = ds * fg;
            }
        }
        mm(gemm, 1, 0, n, h, n, A, n, dm, h, 0.0, dq, h);
        for (long k = 0; k < nh; k++) {
            dq[k] *= 1.0 - q[k] * q[k];
            ds_carry[k] = dm[k];
        }
        mm(gemm, 0, 1, n, h, h, dq, h, Wg, h, 1.0, ds_carry, h);
        mm(gemm, 0, 1, n, h, h4, dz, h4, Wh, h4, 0.0, dh_carry, h);
        if (R) {
            for (long k = 0; k < nh; k++)
                dh_carry[k] *= R[k];
        }
    }
}
