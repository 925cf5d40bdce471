use std::f64::consts::TAU;

use mpdit::conditioning::spectral_conv_1d;
use mpdit::tensor::{DftMatrices, Rng, Tape, Tensor};

/// Forward transform, complex contraction of the kept bins and inverse,
/// each written as explicit loops.
pub fn naive_spectral(x: &Tensor<f64>, wr: &Tensor<f64>, wi: &Tensor<f64>) -> Vec<f64> {
    let (b, cin, g) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, modes) = (wr.shape()[1], wr.shape()[2]);
    let mut out = vec![0.0; b * cout * g];
    for bi in 0..b {
        let mut xr = vec![vec![0.0; modes]; cin];
        let mut xi = vec![vec![0.0; modes]; cin];
        for i in 0..cin {
            for k in 0..modes {
                for j in 0..g {
                    let a = -TAU * (k * j) as f64 / g as f64;
                    let v = x.data()[(bi * cin + i) * g + j];
                    xr[i][k] += v * a.cos();
                    xi[i][k] += v * a.sin();
                }
            }
        }
        for o in 0..cout {
            for k in 0..modes {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..cin {
                    let (a, bb) = (wr.data()[(i * cout + o) * modes + k], wi.data()[(i * cout + o) * modes + k]);
                    re += xr[i][k] * a - xi[i][k] * bb;
                    im += xr[i][k] * bb + xi[i][k] * a;
                }
                // Half-spectrum inverse: interior bins count twice, and the
                // imaginary parts of bin 0 and the Nyquist bin drop out.
                let edge = k == 0 || (g % 2 == 0 && k == g / 2);
                let w = if edge { 1.0 } else { 2.0 };
                for j in 0..g {
                    let a = TAU * (k * j) as f64 / g as f64;
                    let im_part = if edge { 0.0 } else { im * a.sin() };
                    out[(bi * cout + o) * g + j] += w * (re * a.cos() - im_part) / g as f64;
                }
            }
        }
    }
    out
}

/// Largest absolute gap between the tape op and [`naive_spectral`] over
/// channel counts {1, 2, 32}, modes {1, 8, 16} and grids {8, 32}, with the
/// number of cases run.
pub fn grid_worst_error(seed: u64) -> (usize, f64) {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for cin in [1, 2, 32] {
        for cout in [1, 2, 32] {
            for modes in [1, 8, 16] {
                for g in [8, 32] {
                    if modes > g / 2 + 1 {
                        continue;
                    }
                    let dft = DftMatrices::<f64>::new(g).unwrap();
                    let x = Tensor::randn(&[2, cin, g], &mut rng);
                    let wr = Tensor::randn(&[cin, cout, modes], &mut rng);
                    let wi = Tensor::randn(&[cin, cout, modes], &mut rng);
                    let tape = Tape::new();
                    let out = spectral_conv_1d(
                        &tape,
                        &dft,
                        tape.constant(x.clone()),
                        tape.constant(wr.clone()),
                        tape.constant(wi.clone()),
                    )
                    .unwrap();
                    let got = tape.value(out);
                    let want = naive_spectral(&x, &wr, &wi);
                    for (a, b) in got.data().iter().zip(&want) {
                        worst = worst.max((a - b).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    (cases, worst)
}
