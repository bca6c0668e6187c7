# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Two loops dominate a full experiment run: the per-second car-following speed
update (called once per simulation step over every active vehicle) and the
gradient/hessian histogram accumulation inside the boosted-tree learner
(called once per tree node per feature block).  Both are plain loops over
flat float64/int arrays, so they are kept free of any Python object access.

The arithmetic here must stay expression-for-expression identical to the
numpy fallbacks in kernels.py: the engine equivalence guarantee is bitwise.
"""
from libc.math cimport sqrt


def follow_speeds(double[::1] pos, double[::1] speed, int[::1] leader,
                  double[::1] head_free, double[::1] head_lead_speed,
                  double[::1] limit, double[::1] speed_cap, double[::1] noise,
                  double accel, double decel, double min_gap,
                  double vehicle_length, double dt, double[::1] out):
    """One safe-speed decision per active vehicle.

    leader[i] >= 0 indexes the vehicle directly ahead in the same lane queue
    (arrays are queue-ordered, so the leader's entries are pre-step values);
    leader[i] < 0 marks a queue head whose constraint was resolved by the
    route lookahead into (head_free, head_lead_speed).
    """
    cdef Py_ssize_t i, n = pos.shape[0]
    cdef Py_ssize_t lead
    cdef double fr, vl, vs, vd
    cdef double bt = decel * dt
    for i in range(n):
        lead = leader[i]
        if lead >= 0:
            fr = pos[lead] - vehicle_length - pos[i] - min_gap
            vl = speed[lead]
        else:
            fr = head_free[i]
            vl = head_lead_speed[i]
        if fr < 0.0:
            fr = 0.0
        vs = -bt + sqrt(bt * bt + vl * vl + 2.0 * decel * fr)
        vd = speed[i] + accel * dt
        if limit[i] < vd:
            vd = limit[i]
        if vs < vd:
            vd = vs
        if fr / dt < vd:
            vd = fr / dt
        if speed_cap[i] < vd:
            vd = speed_cap[i]
        vd = vd - noise[i]
        if vd < 0.0:
            vd = 0.0
        out[i] = vd


def hist_build(const unsigned char[:, ::1] codes, const int[::1] rows,
               const double[::1] grad, const double[::1] hess,
               double[:, ::1] hist_g, double[:, ::1] hist_h,
               double[:, ::1] hist_n):
    """Accumulate per-(feature, bin) gradient/hessian/count histograms.

    codes holds the binned feature matrix (bin 0 = missing); rows selects the
    sample subset for the current tree node.  Output arrays must be zeroed by
    the caller.  Counts are float64 so all three histograms share one buffer
    layout; they stay exact (small integers).  Accumulation order per cell is
    ascending row, matching the bincount-based fallback exactly.
    """
    cdef Py_ssize_t k, f, m = rows.shape[0], nf = codes.shape[1]
    cdef Py_ssize_t r
    cdef unsigned char c
    for k in range(m):
        r = rows[k]
        for f in range(nf):
            c = codes[r, f]
            hist_g[f, c] += grad[r]
            hist_h[f, c] += hess[r]
            hist_n[f, c] += 1.0
