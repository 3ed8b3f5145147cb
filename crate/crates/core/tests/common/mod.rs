#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saccn::Tensor;

pub fn random_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Direct quadruple-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (cout, k1, k2): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad.0 - dil.0 * (k1 - 1) - 1) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - dil.1 * (k2 - 1) - 1) / stride.1 + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[co]);
                    for ci in 0..cin {
                        for ky in 0..k1 {
                            for kx in 0..k2 {
                                let iy = (oy * stride.0 + ky * dil.0) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx * dil.1) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin + ci) * k1 + ky) * k2 + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn init_params<M: saccn::Module>(m: &M, seed: u64) -> saccn::ParamSet<f64> {
    let mut p = saccn::ParamSet::new();
    m.init_params(seed, &mut p);
    p
}

pub fn zero_params<M: saccn::Module>(m: &M) -> saccn::ParamSet<f64> {
    let mut p = saccn::ParamSet::new();
    for spec in m.param_specs() {
        p.insert(spec.name, Tensor::zeros(&spec.shape));
    }
    p
}

/// Zero every tensor whose name starts with one of `prefixes`.
pub fn zero_matching(params: &mut saccn::ParamSet<f64>, prefixes: &[&str]) {
    for (name, t) in params.iter_mut() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
