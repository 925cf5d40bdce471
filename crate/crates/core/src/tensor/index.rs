//! Index maps for data rearrangements.
//!
//! Every rearrangement (permute, narrow, pad, patchify, pixel unshuffle) is
//! expressed as a gather: `out[i] = src[map[i]]`, with [`ZERO`] marking
//! positions that are filled with zero. One differentiable gather op on the
//! tape then covers all of them.

use crate::error::{Error, Result};

/// Marker for "no source element": the output is zero there.
pub const ZERO: usize = usize::MAX;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Offsets `sum(idx[k] * strides[k])` for every multi-index of `shape`, in
/// row-major order.
pub fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return out;
    }
    // Merge axes that walk memory as one, so the inner loop runs long.
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(shape.len());
    for (&n, &s) in shape.iter().zip(strides) {
        if n == 1 {
            continue;
        }
        match dims.last_mut() {
            Some(last) if last.1 == s * n => *last = (last.0 * n, s),
            _ => dims.push((n, s)),
        }
    }
    let (inner_n, inner_s) = dims.pop().unwrap_or((1, 0));
    let mut idx = vec![0usize; dims.len()];
    let mut off = 0usize;
    loop {
        out.extend((0..inner_n).map(|k| off + k * inner_s));
        let mut ax = dims.len();
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += dims[ax].1;
            if idx[ax] < dims[ax].0 {
                break;
            }
            off -= dims[ax].1 * dims[ax].0;
            idx[ax] = 0;
        }
    }
}

/// Walks every row-major position of `shape` in runs along the merged
/// innermost axis. For each run, `f(i, oa, ob, n, ia, ib)` receives the
/// position and offsets (under strides `sa` and `sb`) of its first element,
/// its length and the two inner strides.
pub fn for_each_run2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    if shape.contains(&0) {
        return;
    }
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(shape.len());
    for ((&n, &a), &b) in shape.iter().zip(sa).zip(sb) {
        if n == 1 {
            continue;
        }
        match dims.last_mut() {
            Some(last) if last.1 == a * n && last.2 == b * n => *last = (last.0 * n, a, b),
            _ => dims.push((n, a, b)),
        }
    }
    let (inner, ia, ib) = dims.pop().unwrap_or((1, 0, 0));
    let mut idx = vec![0usize; dims.len()];
    let (mut i, mut oa, mut ob) = (0usize, 0usize, 0usize);
    loop {
        f(i, oa, ob, inner, ia, ib);
        i += inner;
        let mut ax = dims.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            let (n, a, b) = dims[ax];
            idx[ax] += 1;
            oa += a;
            ob += b;
            if idx[ax] < n {
                break;
            }
            oa -= a * n;
            ob -= b * n;
            idx[ax] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` viewed as `out` under broadcasting (zero on broadcast axes).
pub fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

pub fn permute(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::dim(
            "permute",
            format!("axes {axes:?} invalid for shape {shape:?}"),
        ));
    }
    for &a in axes {
        if std::mem::replace(&mut seen[a], true) {
            return Err(Error::dim("permute", format!("repeated axis in {axes:?}")));
        }
    }
    let src = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
    Ok((out_shape.clone(), strided_offsets(&out_shape, &st)))
}

pub fn narrow(
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::dim(
            "narrow",
            format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
        ));
    }
    let mut out = shape.to_vec();
    out[axis] = len;
    let st = strides(shape);
    let base = start * st[axis];
    let offsets = strided_offsets(&out, &st)
        .into_iter()
        .map(|o| o + base)
        .collect();
    Ok((out, offsets))
}

/// Extend `axis` to `new_len`, zero-filling the tail.
pub fn pad(shape: &[usize], axis: usize, new_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if axis >= shape.len() || new_len < shape[axis] {
        return Err(Error::dim(
            "pad",
            format!("cannot pad axis {axis} of {shape:?} to {new_len}"),
        ));
    }
    let mut out = shape.to_vec();
    out[axis] = new_len;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut map = Vec::with_capacity(out.iter().product());
    for o in 0..outer {
        for k in 0..new_len {
            for i in 0..inner {
                map.push(if k < shape[axis] {
                    (o * shape[axis] + k) * inner + i
                } else {
                    ZERO
                });
            }
        }
    }
    Ok((out, map))
}

/// `(B, h, w, d)` latent to `(B, L, p*p*d)` patch rows: patches in row-major
/// grid order, each flattened as `(dy, dx, channel)`.
pub fn patchify(
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    p: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_patch(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let feat = p * p * d;
    let mut map = Vec::with_capacity(batch * h * w * d);
    for b in 0..batch {
        for gi in 0..gh {
            for gj in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let y = gi * p + dy;
                        let x = gj * p + dx;
                        let base = ((b * h + y) * w + x) * d;
                        map.extend(base..base + d);
                    }
                }
            }
        }
    }
    Ok((vec![batch, gh * gw, feat], map))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    p: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_patch(h, w, p)?;
    let (_, forward) = patchify(batch, h, w, d, p)?;
    let mut inverse = vec![0; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        inverse[src] = i;
    }
    Ok((vec![batch, h, w, d], inverse))
}

/// `(B, rows*cols, 4*d)` coarse tokens to `(B, 4*rows*cols, d)` fine tokens:
/// chunk `(a, b)` (chunk index `2a + b`) of coarse token `(i, j)` lands on
/// fine position `(2i + a, 2j + b)` of the row-major `2rows x 2cols` grid.
pub fn pixel_unshuffle(batch: usize, rows: usize, cols: usize, d: usize) -> (Vec<usize>, Vec<usize>) {
    let fine_cols = 2 * cols;
    let fine_tokens = 4 * rows * cols;
    let mut map = vec![0; batch * fine_tokens * d];
    for b in 0..batch {
        for i in 0..rows {
            for j in 0..cols {
                let coarse = (b * rows * cols + i * cols + j) * 4 * d;
                for a in 0..2 {
                    for bb in 0..2 {
                        let fine = b * fine_tokens + (2 * i + a) * fine_cols + (2 * j + bb);
                        let chunk = coarse + (2 * a + bb) * d;
                        for f in 0..d {
                            map[fine * d + f] = chunk + f;
                        }
                    }
                }
            }
        }
    }
    (vec![batch, fine_tokens, d], map)
}

fn check_patch(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::config(format!(
            "patch size p={p} must divide latent height h={h} and width w={w}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let (shape, map) = permute(&[2, 3], &[1, 0]).unwrap();
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 3]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        assert_eq!(broadcast_strides(&[1, 3], &[4, 3]), vec![0, 1]);
    }

    #[test]
    fn pad_and_narrow_are_adjoint_on_prefix() {
        let (s, m) = pad(&[2, 2], 1, 3).unwrap();
        assert_eq!(s, vec![2, 3]);
        assert_eq!(m, vec![0, 1, ZERO, 2, 3, ZERO]);
        let (s, m) = narrow(&[2, 3], 1, 1, 2).unwrap();
        assert_eq!(s, vec![2, 2]);
        assert_eq!(m, vec![1, 2, 4, 5]);
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        assert!(matches!(patchify(1, 32, 32, 4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let (_, f) = patchify(2, 4, 6, 3, 2).unwrap();
        let (_, g) = unpatchify(2, 4, 6, 3, 2).unwrap();
        for (i, &src) in g.iter().enumerate() {
            assert_eq!(f[src], i);
        }
    }
}
