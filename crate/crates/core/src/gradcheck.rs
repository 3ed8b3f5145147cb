//! Central-difference gradient checking, and a suite covering every
//! differentiable operation and block.

use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::amm::AmmBlock;
use crate::attention::{csa, RamBlock, SamBlock};
use crate::autograd::{ConvGeometry, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::net::{NetConfig, SaccnModel};
use crate::nn::{LinearLayer, Module, ParamSet, Session};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::mse_loss;

/// Outcome of comparing analytic and numeric gradients coordinate by
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |a - n| / max(|a|, |n|, 1e-8)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn scalar_of(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

fn compare<E>(x: &Tensor<f64>, eps: f64, eval: E, analytic: &Tensor<f64>) -> Result<GradCheck>
where
    E: Fn(&Tensor<f64>) -> Result<f64>,
{
    let base = eval(x)?;
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Check `f` at `x`. `f` receives a fresh tape and a variable holding its
/// input, and must return a one-element tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input.clone())?;
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let v = tape.parameter(x.clone())?;
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.take(v).expect("input is a gradient leaf");
    compare(x, eps, eval, &analytic)
}

/// Like [`grad_check`], but `f` runs inside a [`Session`] over `params`, so
/// it can call layers. To check a parameter, bind it to the probe variable
/// with [`Session::bind`].
pub fn grad_check_session<F>(params: &ParamSet<f64>, f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
{
    let eval = |input: &Tensor<f64>| -> Result<f64> {
        let mut s = Session::new(params, false);
        let v = s.tape.constant(input.clone())?;
        let out = f(&mut s, v)?;
        scalar_of(&s.tape, out)
    };
    let mut s = Session::new(params, false);
    let v = s.tape.parameter(x.clone())?;
    let out = f(&mut s, v)?;
    let analytic = s.tape.backward(out)?.take(v).expect("input is a gradient leaf");
    compare(x, eps, eval, &analytic)
}

/// Uniform values in `[lo, hi)` from the `(seed, label)` stream.
pub fn random_tensor(seed: u64, label: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, label, 0);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(seed: u64, label: &str, shape: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(seed, label, shape, 0.1, 1.0);
    let mut r = rng::stream(seed, label, 1);
    for v in t.data_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub coordinates: usize,
    pub result: GradCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.result.max_rel_error.total_cmp(&b.result.max_rel_error))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.result.max_rel_error < tolerance)
    }
}

pub const SUITE_EPS: f64 = 1e-5;
/// Step for the attention query weights inside the whole network. Their
/// gradients are tiny next to the objective, so a small step drowns in
/// rounding.
pub const SUITE_ATTENTION_EPS: f64 = 1e-3;

/// Settings of the network checked at the end of the suite.
pub fn suite_net_config(seed: u64) -> NetConfig {
    NetConfig {
        base_width: 4,
        input_channels: 1,
        seed,
        ..NetConfig::default()
    }
}

/// Input extent for the whole-network checks.
pub const SUITE_NET_EXTENT: usize = 32;

fn init<M: Module>(m: &M, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    m.init_params(seed, &mut p);
    p
}

/// Check every differentiable operation, each attention and multi-scale
/// block, and the whole network on a 32×32 input, all in 64-bit.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let eps = SUITE_EPS;
    let mut entries = Vec::new();
    let mut push = |name: &str, x: &Tensor<f64>, result: Result<GradCheck>| -> Result<()> {
        entries.push(SuiteEntry {
            name: name.to_string(),
            coordinates: x.len(),
            result: result?,
        });
        Ok(())
    };
    let rand = |label: &str, shape: &[usize]| random_tensor(seed, label, shape, -1.0, 1.0);

    // Weighted sum with fixed random weights, so every output coordinate
    // contributes a distinct amount.
    let weighted = |t: &mut Tape<f64>, v: Var, label: &str| -> Result<Var> {
        let w = t.constant(random_tensor(seed, label, t.shape(v), 0.5, 1.5))?;
        let p = t.mul(v, w)?;
        t.sum_all(p)
    };

    let a = rand("a", &[2, 3, 4, 4]);
    let b = rand("b", &[1, 3, 1, 1]);
    for (name, op) in [
        ("add", crate::BinaryOp::Add),
        ("sub", crate::BinaryOp::Sub),
        ("mul", crate::BinaryOp::Mul),
    ] {
        let lhs = format!("{name} (lhs)");
        push(
            &lhs,
            &a,
            grad_check(
                |t, x| {
                    let c = t.constant(b.clone())?;
                    let y = t.elementwise(op, x, c)?;
                    weighted(t, y, "w.elem")
                },
                &a,
                eps,
            ),
        )?;
        let rhs = format!("{name} (broadcast rhs)");
        push(
            &rhs,
            &b,
            grad_check(
                |t, x| {
                    let c = t.constant(a.clone())?;
                    let y = t.elementwise(op, c, x)?;
                    weighted(t, y, "w.elem")
                },
                &b,
                eps,
            ),
        )?;
    }
    let s = rand("scale", &[3, 4]);
    push(
        "scale/add_scalar",
        &s,
        grad_check(
            |t, x| {
                let y = t.scale(x, -1.7)?;
                let y = t.add_scalar(y, 0.3)?;
                let y = t.mul(y, y)?;
                t.sum_all(y)
            },
            &s,
            eps,
        ),
    )?;

    let ma = rand("ma", &[3, 4]);
    let mb = rand("mb", &[4, 5]);
    push(
        "matmul (lhs)",
        &ma,
        grad_check(
            |t, x| {
                let c = t.constant(mb.clone())?;
                let y = t.matmul(x, c)?;
                weighted(t, y, "w.mm")
            },
            &ma,
            eps,
        ),
    )?;
    push(
        "matmul (rhs)",
        &mb,
        grad_check(
            |t, x| {
                let c = t.constant(ma.clone())?;
                let y = t.matmul(c, x)?;
                weighted(t, y, "w.mm")
            },
            &mb,
            eps,
        ),
    )?;
    let ba = rand("ba", &[2, 3, 4]);
    let bb = rand("bb", &[2, 4, 2]);
    push(
        "batched matmul",
        &ba,
        grad_check(
            |t, x| {
                let c = t.constant(bb.clone())?;
                let y = t.matmul(x, c)?;
                weighted(t, y, "w.bmm")
            },
            &ba,
            eps,
        ),
    )?;

    let sm = rand("softmax", &[2, 3, 5]);
    for axis in [1usize, 2] {
        push(
            &format!("softmax (axis {axis})"),
            &sm,
            grad_check(
                |t, x| {
                    let y = t.softmax(x, axis)?;
                    weighted(t, y, "w.softmax")
                },
                &sm,
                eps,
            ),
        )?;
    }

    let kinked = away_from_zero(seed, "relu", &[2, 3, 4]);
    push(
        "relu",
        &kinked,
        grad_check(
            |t, x| {
                let y = t.relu(x)?;
                weighted(t, y, "w.act")
            },
            &kinked,
            eps,
        ),
    )?;
    let sg = rand("sigmoid", &[2, 3, 4]);
    push(
        "sigmoid",
        &sg,
        grad_check(
            |t, x| {
                let y = t.sigmoid(x)?;
                weighted(t, y, "w.act")
            },
            &sg,
            eps,
        ),
    )?;

    let r = rand("reduce", &[2, 3, 4, 5]);
    push(
        "sum (C)",
        &r,
        grad_check(
            |t, x| {
                let y = t.sum(x, &[1])?;
                weighted(t, y, "w.red")
            },
            &r,
            eps,
        ),
    )?;
    push(
        "mean (H, W)",
        &r,
        grad_check(
            |t, x| {
                let y = t.mean(x, &[2, 3])?;
                weighted(t, y, "w.red")
            },
            &r,
            eps,
        ),
    )?;
    push(
        "max (H, W)",
        &r,
        grad_check(
            |t, x| {
                let y = t.max(x, &[2, 3])?;
                weighted(t, y, "w.red")
            },
            &r,
            eps,
        ),
    )?;
    push(
        "max (C)",
        &r,
        grad_check(
            |t, x| {
                let y = t.max(x, &[1])?;
                weighted(t, y, "w.red")
            },
            &r,
            eps,
        ),
    )?;

    let l = rand("layout", &[2, 3, 2, 2]);
    let other = rand("layout.other", &[2, 1, 2, 2]);
    push(
        "reshape/transpose",
        &l,
        grad_check(
            |t, x| {
                let y = t.reshape(x, &[2, 3, 4])?;
                let y = t.transpose2d(y)?;
                weighted(t, y, "w.layout")
            },
            &l,
            eps,
        ),
    )?;
    push(
        "concat",
        &l,
        grad_check(
            |t, x| {
                let o = t.constant(other.clone())?;
                let y = t.concat(&[o, x, o], 1)?;
                weighted(t, y, "w.concat")
            },
            &l,
            eps,
        ),
    )?;

    let cx = rand("conv.x", &[2, 3, 7, 9]);
    let cw = rand("conv.w", &[4, 3, 1, 3]);
    let cb = rand("conv.b", &[4]);
    let dilated = ConvGeometry::padded((0, 2)).with_dilation((1, 2));
    let conv = |t: &mut Tape<f64>, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = t.conv2d(x, w, Some(b), dilated)?;
        weighted(t, y, "w.conv")
    };
    push(
        "conv2d (input)",
        &cx,
        grad_check(
            |t, x| {
                let w = t.constant(cw.clone())?;
                let b = t.constant(cb.clone())?;
                conv(t, x, w, b)
            },
            &cx,
            eps,
        ),
    )?;
    push(
        "conv2d (weight)",
        &cw,
        grad_check(
            |t, w| {
                let x = t.constant(cx.clone())?;
                let b = t.constant(cb.clone())?;
                conv(t, x, w, b)
            },
            &cw,
            eps,
        ),
    )?;
    push(
        "conv2d (bias)",
        &cb,
        grad_check(
            |t, b| {
                let x = t.constant(cx.clone())?;
                let w = t.constant(cw.clone())?;
                conv(t, x, w, b)
            },
            &cb,
            eps,
        ),
    )?;
    let sw = rand("conv.strided", &[2, 3, 3, 3]);
    let strided = ConvGeometry {
        stride: (2, 2),
        padding: (1, 1),
        dilation: (1, 1),
    };
    push(
        "conv2d (3x3, stride 2)",
        &cx,
        grad_check(
            |t, x| {
                let w = t.constant(sw.clone())?;
                let y = t.conv2d(x, w, None, strided)?;
                weighted(t, y, "w.conv")
            },
            &cx,
            eps,
        ),
    )?;

    let px = rand("pool", &[2, 2, 6, 6]);
    for (name, kind) in [("maxpool", PoolKind::Max), ("avgpool", PoolKind::Avg)] {
        push(
            name,
            &px,
            grad_check(
                |t, x| {
                    let y = t.pool2d(kind, x, (2, 2), (2, 2))?;
                    weighted(t, y, "w.pool")
                },
                &px,
                eps,
            ),
        )?;
    }
    let ux = rand("upsample", &[1, 2, 3, 3]);
    push(
        "upsample2x",
        &ux,
        grad_check(
            |t, x| {
                let y = t.upsample2x(x)?;
                weighted(t, y, "w.up")
            },
            &ux,
            eps,
        ),
    )?;

    let linear = LinearLayer::new("fc", 5, 3);
    let lp = init(&linear, seed);
    let lx = rand("linear", &[4, 5]);
    push(
        "linear (input)",
        &lx,
        grad_check_session(
            &lp,
            |s, x| {
                let y = linear.forward(s, x)?;
                weighted(&mut s.tape, y, "w.fc")
            },
            &lx,
            eps,
        ),
    )?;
    let lw = lp.get("fc.weight").expect("initialised").clone();
    push(
        "linear (weight)",
        &lw,
        grad_check_session(
            &lp,
            |s, w| {
                s.bind("fc.weight", w);
                let x = s.input(lx.clone())?;
                let y = linear.forward(s, x)?;
                weighted(&mut s.tape, y, "w.fc")
            },
            &lw,
            eps,
        ),
    )?;

    let target = rand("mse.gt", &[2, 1, 4, 4]);
    let pred = rand("mse.pred", &[2, 1, 4, 4]);
    push(
        "mse_loss",
        &pred,
        grad_check(
            |t, x| {
                let g = t.constant(target.clone())?;
                mse_loss(t, x, g)
            },
            &pred,
            eps,
        ),
    )?;

    let ram = RamBlock::new("ram", 4, 2)?;
    let rp = init(&ram, seed);
    let rx = rand("ram.x", &[1, 4, 6, 6]);
    push(
        "RAM",
        &rx,
        grad_check_session(
            &rp,
            |s, x| {
                let y = ram.forward(s, x)?;
                weighted(&mut s.tape, y, "w.ram")
            },
            &rx,
            eps,
        ),
    )?;
    let rw = rp.get("ram.spatial.weight").expect("initialised").clone();
    push(
        "RAM (spatial conv weight)",
        &rw,
        grad_check_session(
            &rp,
            |s, w| {
                s.bind("ram.spatial.weight", w);
                let x = s.input(rx.clone())?;
                let y = ram.forward(s, x)?;
                weighted(&mut s.tape, y, "w.ram")
            },
            &rw,
            eps,
        ),
    )?;

    let sam = SamBlock::new("sam", 4, 2)?;
    let sp = init(&sam, seed);
    let sx = rand("sam.x", &[1, 4, 5, 5]);
    push(
        "SSA",
        &sx,
        grad_check_session(
            &sp,
            |s, x| {
                let y = sam.ssa(s, x)?.output;
                weighted(&mut s.tape, y, "w.sam")
            },
            &sx,
            eps,
        ),
    )?;
    push(
        "CSA",
        &sx,
        grad_check_session(
            &sp,
            |s, x| {
                let y = csa(s, x)?.output;
                weighted(&mut s.tape, y, "w.sam")
            },
            &sx,
            eps,
        ),
    )?;
    push(
        "SAM",
        &sx,
        grad_check_session(
            &sp,
            |s, x| {
                let y = sam.forward(s, x)?;
                weighted(&mut s.tape, y, "w.sam")
            },
            &sx,
            eps,
        ),
    )?;

    let amm = AmmBlock::new("amm", 4, 3)?;
    let ap = init(&amm, seed);
    let ax = rand("amm.x", &[1, 4, 7, 9]);
    push(
        "AMM",
        &ax,
        grad_check_session(
            &ap,
            |s, x| {
                let y = amm.forward(s, x)?;
                weighted(&mut s.tape, y, "w.amm")
            },
            &ax,
            eps,
        ),
    )?;

    let model = SaccnModel::<f64>::build(&suite_net_config(seed))?;
    let e = SUITE_NET_EXTENT;
    let image = random_tensor(seed, "net.x", &[1, 1, e, e], 0.0, 1.0);
    push(
        "network (input)",
        &image,
        grad_check_session(
            &model.params,
            |s, x| {
                let y = model.net.forward(s, x)?;
                s.tape.sum_all(y)
            },
            &image,
            eps,
        ),
    )?;
    for (name, step) in [("sam.query.weight", SUITE_ATTENTION_EPS), ("enc.conv2_2.weight", eps)] {
        let p = model.params.get(name).ok_or_else(|| Error::MissingParam(name.into()))?.clone();
        push(
            &format!("network ({name})"),
            &p,
            grad_check_session(
                &model.params,
                |s, w| {
                    s.bind(name, w);
                    let x = s.input(image.clone())?;
                    let y = model.net.forward(s, x)?;
                    s.tape.sum_all(y)
                },
                &p,
                step,
            ),
        )?;
    }

    Ok(SuiteReport {
        entries,
        elapsed: start.elapsed(),
    })
}
