/* RGrN sequence recurrence: forward unroll and backprop through time.
 *
 * All arrays are dense row-major float64. BLAS is injected as a Fortran
 * dgemm pointer so the same code links against whatever scipy ships.
 * Gate blocks along the 4h axis are ordered (i, f, o, c~).
 */
#ifndef MSGL_RGRN_CORE_H
#define MSGL_RGRN_CORE_H

typedef void (*msgl_dgemm_fn)(char *transa, char *transb, int *m, int *n, int *k,
                              double *alpha, double *a, int *lda, double *b, int *ldb,
                              double *beta, double *c, int *ldc);

/* Zx[T*n, 4h] must hold X @ Wx on entry. R may be NULL (no recurrent dropout). */
void msgl_rgrn_forward(msgl_dgemm_fn gemm, int T, int n, int h,
                       const double *Zx, const double *A, const double *Wh,
                       const double *b, const double *Wg, const double *bg,
                       const double *R, double *G, double *Q, double *M,
                       double *S, double *Hd, double *H, double *hd);

/* Fills DZ[T, n, 4h] and DQ[T, n, h]; weight gradients are reduced by the caller. */
void msgl_rgrn_backward(msgl_dgemm_fn gemm, int T, int n, int h,
                        const double *A, const double *Wh, const double *Wg,
                        const double *R, const double *G, const double *Q,
                        const double *M, const double *S, const double *dH,
                        double *DZ, double *DQ, double *dh_carry,
                        double *ds_carry, double *dm);

#endif
