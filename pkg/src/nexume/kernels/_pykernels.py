"""Pure-Python inner loops, used when the compiled extension is unavailable.

Same signatures, iteration order and rounding as ``_ckernels``; results are
bit-identical on both integer and float paths.
"""


def requant(acc, m0, shift, lo, hi):
    if m0 == 0:
        return acc
    v = acc * m0
    if shift > 0:
        q = v >> shift
        r = v - (q << shift)
        half = 1 << (shift - 1)
        if r > half or (r == half and q & 1):
            q += 1
    else:
        q = v << (-shift)
    return lo if q < lo else hi if q > hi else q


def gemm_range_i(A, B, out, start, stop, m0=0, shift=0, lo=0, hi=0):
    n = B.shape[1]
    a_rows = A.tolist()
    b_cols = B.T.tolist()
    for e in range(start, stop):
        i, j = divmod(e, n)
        acc = 0
        for av, bv in zip(a_rows[i], b_cols[j]):
            acc += av * bv
        out[i, j] = requant(acc, m0, shift, lo, hi)


def gemm_range_f(A, B, out, start, stop):
    n = B.shape[1]
    a_rows = A.tolist()
    b_cols = B.T.tolist()
    for e in range(start, stop):
        i, j = divmod(e, n)
        acc = 0.0
        for av, bv in zip(a_rows[i], b_cols[j]):
            acc = acc + av * bv
        out[i, j] = acc


def _conv_range(x, w, out, start, stop, zero, post):
    ho, wo = out.shape[1], out.shape[2]
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    xs = x.tolist()
    ws = w.tolist()
    for e in range(start, stop):
        f, rem = divmod(e, ho * wo)
        i, j = divmod(rem, wo)
        wf = ws[f]
        acc = zero
        for c in range(cin):
            xc = xs[c]
            wc = wf[c]
            for a in range(kh):
                row = xc[i + a]
                wr = wc[a]
                for b in range(kw):
                    acc = acc + row[j + b] * wr[b]
        out[f, i, j] = post(acc)


def conv_range_i(x, w, out, start, stop, m0=0, shift=0, lo=0, hi=0):
    _conv_range(x, w, out, start, stop, 0, lambda acc: requant(acc, m0, shift, lo, hi))


def conv_range_f(x, w, out, start, stop):
    _conv_range(x, w, out, start, stop, 0.0, lambda acc: acc)


def _conv1d(x, k, out, zero):
    xs = x.tolist()
    ks = k.tolist()
    m = len(ks)
    for t in range(out.shape[0]):
        acc = zero
        for j in range(m):
            acc = acc + xs[t + j] * ks[j]
        out[t] = acc


def conv1d_i(x, k, out):
    _conv1d(x, k, out, 0)


def conv1d_f(x, k, out):
    _conv1d(x, k, out, 0.0)
