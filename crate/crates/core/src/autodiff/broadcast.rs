//! Index arithmetic for broadcasting over tensors of rank <= 4.

/// Left-pads a shape with ones to rank 4.
pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

fn strides4(shape: [usize; 4]) -> [usize; 4] {
    [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1]
}

/// Numpy-style broadcast of two shapes: ranks are aligned on the right and
/// an extent of 1 stretches to match the other operand.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad4(a), pad4(b));
    let mut out = Vec::with_capacity(rank);
    for i in 4 - rank..4 {
        let (x, y) = (pa[i], pb[i]);
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        });
    }
    Some(out)
}

/// Source strides when `src` is read as if it had shape `out`
/// (stretched axes get stride 0).
fn stretched_strides(src: &[usize], out: &[usize]) -> [usize; 4] {
    let ps = pad4(src);
    let po = pad4(out);
    let st = strides4(ps);
    let mut res = [0; 4];
    for i in 0..4 {
        res[i] = if ps[i] == 1 && po[i] != 1 { 0 } else { st[i] };
    }
    res
}

/// Calls `f(out_index, src_index)` for every element of `out`.
#[inline]
fn for_each_mapped(src: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let po = pad4(out);
    let ss = stretched_strides(src, out);
    let mut o = 0;
    for i0 in 0..po[0] {
        for i1 in 0..po[1] {
            for i2 in 0..po[2] {
                let base = i0 * ss[0] + i1 * ss[1] + i2 * ss[2];
                for i3 in 0..po[3] {
                    f(o, base + i3 * ss[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Materializes `data` (shape `src`) at the broadcast shape `out`.
pub(crate) fn expand<T: Copy>(data: &[T], src: &[usize], out: &[usize]) -> Vec<T> {
    if src == out {
        return data.to_vec();
    }
    let n: usize = out.iter().product();
    let mut res = Vec::with_capacity(n);
    for_each_mapped(src, out, |_, s| res.push(data[s]));
    res
}

/// Sums `data` (shape `from`) over the axes stretched relative to `to`.
/// Inverse of [`expand`] for gradients.
pub(crate) fn reduce_to<T: Copy + std::ops::AddAssign + num_traits::Zero>(
    data: &[T],
    from: &[usize],
    to: &[usize],
) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let n: usize = to.iter().product();
    let mut res = vec![T::zero(); n];
    for_each_mapped(to, from, |o, s| res[s] += data[o]);
    res
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn zip_broadcast<T: Copy>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if sa == sb {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let po = pad4(out);
    let ssa = stretched_strides(sa, out);
    let ssb = stretched_strides(sb, out);
    let n: usize = out.iter().product();
    let mut res = Vec::with_capacity(n);
    for i0 in 0..po[0] {
        for i1 in 0..po[1] {
            for i2 in 0..po[2] {
                let ba = i0 * ssa[0] + i1 * ssa[1] + i2 * ssa[2];
                let bb = i0 * ssb[0] + i1 * ssb[1] + i2 * ssb[2];
                for i3 in 0..po[3] {
                    res.push(f(a[ba + i3 * ssa[3]], b[bb + i3 * ssb[3]]));
                }
            }
        }
    }
    res
}
