//! Separable correlation of `[H, W]` planes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Border {
    /// Output shrinks by `taps - 1` along each axis.
    Valid,
    /// Same size, edge pixels repeated.
    Replicate,
}

fn pass_rows(x: &[f64], h: usize, w: usize, taps: &[f64], border: Border) -> (Vec<f64>, usize) {
    let n = taps.len();
    let r = (n / 2) as isize;
    match border {
        Border::Valid => {
            let ow = w + 1 - n;
            let mut out = vec![0.0; h * ow];
            for row in 0..h {
                let src = &x[row * w..(row + 1) * w];
                for c in 0..ow {
                    out[row * ow + c] = taps.iter().zip(&src[c..c + n]).map(|(a, b)| a * b).sum();
                }
            }
            (out, ow)
        }
        Border::Replicate => {
            let mut out = vec![0.0; h * w];
            for row in 0..h {
                let src = &x[row * w..(row + 1) * w];
                for c in 0..w {
                    let mut acc = 0.0;
                    for (k, &t) in taps.iter().enumerate() {
                        let j = c as isize + k as isize - r;
                        acc += t * src[j.clamp(0, w as isize - 1) as usize];
                    }
                    out[row * w + c] = acc;
                }
            }
            (out, w)
        }
    }
}

fn transpose(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = x[r * w + c];
        }
    }
    out
}

/// Correlates with the outer product `col ⊗ row`. Returns `(data, h, w)`.
pub(crate) fn filter_sep(x: &[f64], h: usize, w: usize, taps: &[f64], border: Border) -> (Vec<f64>, usize, usize) {
    let (a, ow) = pass_rows(x, h, w, taps, border);
    let at = transpose(&a, h, ow);
    let (b, oh) = pass_rows(&at, ow, h, taps, border);
    (transpose(&b, ow, oh), oh, ow)
}
