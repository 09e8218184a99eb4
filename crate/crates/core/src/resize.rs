//! Bilinear resampling with half-pixel centres.
//!
//! Source coordinate for output index `i` is `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range; identical sizes are an exact copy.

/// Interpolation taps along one axis: `(lo, hi, weight_hi)` per output index.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            if input == output {
                return (i, i, 0.0);
            }
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resize an `h x w x c` map (channels innermost) to `oh x ow x c`.
pub fn resize_channels(src: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w * c);
    if h == oh && w == ow {
        return src.to_vec();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0; oh * ow * c];
    let px = |y: usize, x: usize| &src[(y * w + x) * c..(y * w + x + 1) * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let (w00, w01) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx);
            let (w10, w11) = (fy * (1.0 - fx), fy * fx);
            let (a, b, cc, d) = (px(y0, x0), px(y0, x1), px(y1, x0), px(y1, x1));
            for (i, v) in out[o..o + c].iter_mut().enumerate() {
                *v = a[i] * w00 + b[i] * w01 + cc[i] * w10 + d[i] * w11;
            }
        }
    }
    out
}

/// Resize a single-channel `h x w` map.
pub fn resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    resize_channels(src, h, w, 1, oh, ow)
}

/// Resize a pairwise map over an `h x w` grid (an `hw x hw` matrix) to an
/// `oh*ow x oh*ow` matrix, interpolating both the row and the column index on
/// their spatial grids.
pub fn resize_pairwise(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let n = h * w;
    let m = oh * ow;
    assert_eq!(src.len(), n * n);
    if n == m && h == oh {
        return src.to_vec();
    }
    // Rows are treated as an h x w grid of length-n channel vectors, so one
    // pass resizes the row index and a transpose-resize-transpose handles
    // the column index.
    let rows_resized = resize_channels(src, h, w, n, oh, ow); // m x n
    let mut t = vec![0.0; n * m];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = rows_resized[i * n + j];
        }
    }
    let cols_resized = resize_channels(&t, h, w, m, oh, ow); // m (cols) x m (rows)
    let mut out = vec![0.0; m * m];
    for j in 0..m {
        for i in 0..m {
            out[i * m + j] = cols_resized[j * m + i];
        }
    }
    out
}

/// Nearest-free binary upsampling: bilinear resize of a {0,1} map, then
/// strict threshold at 0.5.
pub fn resize_binary(src: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let f: Vec<f64> = src.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    resize(&f, h, w, oh, ow).into_iter().map(|v| v > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_same_size() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn constant_stays_constant() {
        let src = vec![0.7; 16];
        for v in resize(&src, 4, 4, 9, 5) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_two_pixels() {
        // 1x2 -> 1x4: src coords -0.25, 0.25, 0.75, 1.25
        let out = resize(&[0.0, 1.0], 1, 2, 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let out = resize(&[0.0, 1.0, 2.0, 3.0], 1, 4, 1, 2);
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pairwise_matches_direct_4d_interpolation() {
        let (h, w, oh, ow) = (2, 3, 4, 2);
        let n = h * w;
        let src: Vec<f64> = (0..n * n).map(|v| ((v * 37) % 11) as f64).collect();
        let out = resize_pairwise(&src, h, w, oh, ow);
        let ty = taps(h, oh);
        let tx = taps(w, ow);
        let weights = |o: usize| -> Vec<(usize, f64)> {
            let (oy, ox) = (o / ow, o % ow);
            let (y0, y1, fy) = ty[oy];
            let (x0, x1, fx) = tx[ox];
            vec![
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ]
        };
        let m = oh * ow;
        for i in 0..m {
            for j in 0..m {
                let mut v = 0.0;
                for (a, wa) in weights(i) {
                    for (b, wb) in weights(j) {
                        v += wa * wb * src[a * n + b];
                    }
                }
                assert!((v - out[i * m + j]).abs() < 1e-9);
            }
        }
    }
}
