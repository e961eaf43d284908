//! Central finite-difference gradient checks in f64 for every tape operation,
//! the loss compositions and each network architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxpipe::loss::{d_loss, g_total, hybrid_focal, HybridFocalParams};
use voxpipe::nets::{ArchSpec, Network};
use voxpipe::tensor::{Act, LossKind, Padding, Tape, Tensor, Var};

pub const SHAPES_PER_OP: usize = 20;
const REL_TOL: f64 = 1e-4;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> voxpipe::Result<Var> + 'a;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Vec<usize>, r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (kinks of relu / leaky relu).
fn away_from_zero(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..2.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values with gaps far above the finite-difference step, so max
/// selections never flip.
fn distinct(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let data = idx
        .iter()
        .map(|&i| i as f64 * 0.05 - 1.0 + r.gen_range(0.0..0.01))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn binary(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_bool(0.4) as u8 as f64).collect()).unwrap()
}

/// `Σ v ⊙ R` for a fixed random `R` of v's shape.
fn wsum(tape: &mut Tape<f64>, v: Var, seed: u64) -> voxpipe::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let r = uniform(shape, &mut rng(seed), -1.0, 1.0);
    let rc = tape.constant(r);
    let m = tape.mul(v, rc)?;
    Ok(tape.sum(m))
}

fn eval(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = f(&mut tape, &vars).unwrap();
    tape.value(l).item()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Largest relative error over all differentiable inputs.
pub fn check(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for (j, nj) in numeric.iter_mut().enumerate() {
            let h = 1e-4 * t.data()[j].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *nj = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub struct OpReport {
    pub name: &'static str,
    pub shapes: usize,
    pub worst: f64,
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [r.gen_range(lo..=hi), r.gen_range(lo..=hi), r.gen_range(lo..=hi)]
}

fn shape5(n: usize, c: usize, d: [usize; 3]) -> Vec<usize> {
    vec![n, c, d[0], d[1], d[2]]
}

fn run_op(name: &'static str, seed: u64, case: impl Fn(&mut ChaCha8Rng, u64) -> f64) -> OpReport {
    let mut r = rng(seed);
    let worst = (0..SHAPES_PER_OP as u64)
        .map(|i| case(&mut r, seed * 1000 + i))
        .fold(0.0, f64::max);
    OpReport {
        name,
        shapes: SHAPES_PER_OP,
        worst,
    }
}

fn conv_case(r: &mut ChaCha8Rng, s: u64, padding: Padding) -> f64 {
    let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let k = dims(r, 1, 3);
    let stride = dims(r, 1, 2);
    let d: [usize; 3] = std::array::from_fn(|a| r.gen_range(k[a]..=k[a] + 3));
    let with_bias = r.gen_bool(0.7);
    let mut inputs = vec![
        uniform(shape5(n, cin, d), r, -1.0, 1.0),
        uniform(shape5(cout, cin, k), r, -1.0, 1.0),
    ];
    if with_bias {
        inputs.push(uniform(vec![cout], r, -1.0, 1.0));
    }
    check(&inputs, &move |t, v| {
        let y = t.conv3d(v[0], v[1], v.get(2).copied(), stride, padding)?;
        wsum(t, y, s)
    })
}

fn convt_case(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let k = dims(r, 1, 3);
    let stride = dims(r, 1, 2);
    let d = dims(r, 1, 3);
    let with_bias = r.gen_bool(0.7);
    let mut inputs = vec![
        uniform(shape5(n, cin, d), r, -1.0, 1.0),
        uniform(shape5(cin, cout, k), r, -1.0, 1.0),
    ];
    if with_bias {
        inputs.push(uniform(vec![cout], r, -1.0, 1.0));
    }
    check(&inputs, &move |t, v| {
        let y = t.conv3d_transpose(v[0], v[1], v.get(2).copied(), stride)?;
        wsum(t, y, s)
    })
}

fn elementwise_case(r: &mut ChaCha8Rng, s: u64, act: Act) -> f64 {
    let shape = shape5(r.gen_range(1..=2), r.gen_range(1..=3), dims(r, 1, 4));
    check(&[away_from_zero(shape, r)], &move |t, v| {
        let y = t.activation(v[0], act);
        wsum(t, y, s)
    })
}

fn loss_inputs(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let shape = shape5(1, 1, dims(r, 1, 5));
    let p = uniform(shape.clone(), r, 0.05, 0.95);
    (p, binary(shape, r))
}

fn loss_case(r: &mut ChaCha8Rng, kind: LossKind) -> f64 {
    let (p, y) = loss_inputs(r);
    check(&[p], &move |t, v| t.loss(v[0], &y, kind))
}

/// Finite-difference step for whole networks.
const NET_STEP: f64 = 1e-6;

/// Gradient of a network's summed, randomly weighted logits with respect to
/// a random subset of its parameters and its input.
fn network_case(r: &mut ChaCha8Rng, s: u64, spec: ArchSpec, xy: usize) -> f64 {
    let net: Network<f64> = Network::build(spec.clone(), s).unwrap();
    let z = match spec {
        ArchSpec::Unet3dFixed { fixed_z, .. } => fixed_z,
        _ => r.gen_range(2..=5),
    };
    let input = uniform(shape5(1, spec.in_channels(), [z, xy, xy]), r, 0.0, 1.0);
    let objective = |net: &Network<f64>, x: &Tensor<f64>| -> (Tape<f64>, voxpipe::nets::Output, Var, Var) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let o = net.forward(&mut tape, xv, true, None).unwrap();
        let l = wsum(&mut tape, o.logit, s).unwrap();
        (tape, o, l, xv)
    };
    let (tape, o, l, xv) = objective(&net, &input);
    let grads = tape.backward(l).unwrap();
    let pg = net.param_grads(&o, &grads);
    let value = |net: &Network<f64>, x: &Tensor<f64>| {
        let (tape, _, l, _) = objective(net, x);
        tape.value(l).item()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = net.params()[pi].tensor.len();
        for _ in 0..2 {
            let j = r.gen_range(0..len);
            analytic.push(pg[pi].map_or(0.0, |g| g.data()[j]));
            let base = net.params()[pi].tensor.data()[j];
            let h = NET_STEP * base.abs().max(1.0);
            let mut plus = net.clone();
            plus.param_mut(name).unwrap().tensor.data_mut()[j] += h;
            let mut minus = net.clone();
            minus.param_mut(name).unwrap().tensor.data_mut()[j] -= h;
            numeric.push((value(&plus, &input) - value(&minus, &input)) / (2.0 * h));
        }
    }
    let gx = grads.get(xv).unwrap();
    for _ in 0..8 {
        let j = r.gen_range(0..input.len());
        analytic.push(gx.data()[j]);
        let h = NET_STEP;
        let mut plus = input.clone();
        plus.data_mut()[j] += h;
        let mut minus = input.clone();
        minus.data_mut()[j] -= h;
        numeric.push((value(&net, &plus) - value(&net, &minus)) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

pub fn all() -> Vec<OpReport> {
    let mut out = vec![
        run_op("conv3d/same", 1, |r, s| conv_case(r, s, Padding::Same)),
        run_op("conv3d/valid", 2, |r, s| conv_case(r, s, Padding::Valid)),
        run_op("conv3d_transpose", 3, convt_case),
        run_op("maxpool3d", 4, |r, s| {
            let d = dims(r, 1, 6);
            let window = dims(r, 1, 3);
            let stride = dims(r, 1, 2);
            let x = distinct(shape5(r.gen_range(1..=2), r.gen_range(1..=2), d), r);
            check(&[x], &move |t, v| {
                let y = t.maxpool3d(v[0], window, stride)?;
                wsum(t, y, s)
            })
        }),
        run_op("instance_norm", 5, |r, s| {
            let c = r.gen_range(1..=3);
            let mut d = dims(r, 1, 4);
            d[2] = d[2].max(2);
            let inputs = [
                uniform(shape5(r.gen_range(1..=2), c, d), r, -2.0, 2.0),
                uniform(vec![c], r, 0.5, 1.5),
                uniform(vec![c], r, -0.5, 0.5),
            ];
            check(&inputs, &move |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                wsum(t, y, s)
            })
        }),
        run_op("relu", 6, |r, s| elementwise_case(r, s, Act::Relu)),
        run_op("leaky_relu", 7, |r, s| elementwise_case(r, s, Act::LeakyRelu(0.2))),
        run_op("sigmoid", 8, |r, s| elementwise_case(r, s, Act::Sigmoid)),
        run_op("add", 9, |r, s| {
            let shape = shape5(1, r.gen_range(1..=3), dims(r, 1, 4));
            let inputs = [uniform(shape.clone(), r, -1.0, 1.0), uniform(shape, r, -1.0, 1.0)];
            check(&inputs, &move |t, v| {
                let y = t.add(v[0], v[1])?;
                wsum(t, y, s)
            })
        }),
        run_op("mul", 10, |r, s| {
            let shape = shape5(1, r.gen_range(1..=3), dims(r, 1, 4));
            let inputs = [uniform(shape.clone(), r, -1.0, 1.0), uniform(shape, r, -1.0, 1.0)];
            check(&inputs, &move |t, v| {
                let y = t.mul(v[0], v[1])?;
                wsum(t, y, s)
            })
        }),
        run_op("scale", 11, |r, s| {
            let k = r.gen_range(-3.0..3.0);
            let x = uniform(shape5(1, 2, dims(r, 1, 4)), r, -1.0, 1.0);
            check(&[x], &move |t, v| {
                let y = t.scale(v[0], k);
                wsum(t, y, s)
            })
        }),
        run_op("concat_channels", 12, |r, s| {
            let (n, d) = (r.gen_range(1..=2), dims(r, 1, 4));
            let inputs = [
                uniform(shape5(n, r.gen_range(1..=3), d), r, -1.0, 1.0),
                uniform(shape5(n, r.gen_range(1..=3), d), r, -1.0, 1.0),
            ];
            check(&inputs, &move |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                wsum(t, y, s)
            })
        }),
        run_op("global_avg_pool", 13, |r, s| {
            let x = uniform(
                shape5(r.gen_range(1..=2), r.gen_range(1..=3), dims(r, 1, 4)),
                r,
                -1.0,
                1.0,
            );
            check(&[x], &move |t, v| {
                let y = t.global_avg_pool(v[0])?;
                wsum(t, y, s)
            })
        }),
        run_op("dense", 14, |r, s| {
            let (n, c, o) = (r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=4));
            let inputs = [
                uniform(vec![n, c], r, -1.0, 1.0),
                uniform(vec![o, c], r, -1.0, 1.0),
                uniform(vec![o], r, -1.0, 1.0),
            ];
            check(&inputs, &move |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                wsum(t, y, s)
            })
        }),
        run_op("sum", 15, |r, _| {
            let x = uniform(shape5(1, 2, dims(r, 1, 4)), r, -1.0, 1.0);
            check(&[x], &|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            })
        }),
        run_op("mean", 16, |r, _| {
            let x = uniform(shape5(1, 2, dims(r, 1, 4)), r, -1.0, 1.0);
            check(&[x], &|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            })
        }),
        run_op("dice_loss", 17, |r, _| {
            let smooth = r.gen_range(1e-6..1.0);
            loss_case(r, LossKind::Dice { smooth })
        }),
        run_op("focal_loss", 18, |r, _| {
            let (delta, gamma) = (r.gen_range(0.1..0.9), r.gen_range(0.0..3.0));
            loss_case(r, LossKind::Focal { delta, gamma })
        }),
        run_op("focal_tversky_loss", 19, |r, _| {
            let (delta, gamma) = (r.gen_range(0.1..0.9), r.gen_range(0.5..2.0));
            loss_case(
                r,
                LossKind::FocalTversky {
                    delta,
                    gamma,
                    smooth: 1e-6,
                },
            )
        }),
        run_op("bce", 20, |r, _| loss_case(r, LossKind::Bce)),
        run_op("squared_error", 21, |r, _| {
            let target = r.gen_range(-1.0..1.0);
            let x = uniform(shape5(1, 1, dims(r, 1, 4)), r, -1.0, 1.0);
            check(&[x], &move |t, v| Ok(t.squared_error(v[0], target)))
        }),
        run_op("hybrid_focal(sigmoid)", 22, |r, _| {
            let (p, y) = loss_inputs(r);
            let logits = Tensor::new(
                p.shape().to_vec(),
                p.data().iter().map(|q| (q / (1.0 - q)).ln()).collect(),
            )
            .unwrap();
            let params = HybridFocalParams {
                lambda: r.gen_range(0.0..1.0),
                ..Default::default()
            };
            check(&[logits], &move |t, v| {
                let p = t.activation(v[0], Act::Sigmoid);
                hybrid_focal(t, p, &y, &params)
            })
        }),
        run_op("d_loss", 23, |r, _| {
            let shape = shape5(1, 1, dims(r, 1, 4));
            let inputs = [uniform(shape.clone(), r, -1.0, 2.0), uniform(shape, r, -1.0, 2.0)];
            check(&inputs, &|t, v| d_loss(t, v[0], v[1]))
        }),
        run_op("g_total", 24, |r, _| {
            let (p, y) = loss_inputs(r);
            let d = uniform(shape5(1, 1, dims(r, 1, 3)), r, -1.0, 2.0);
            let params = HybridFocalParams::default();
            check(&[d, p], &move |t, v| g_total(t, v[0], v[1], &y, &params))
        }),
    ];
    let nets: [(&'static str, ArchSpec, usize); 5] = [
        (
            "net/deepvox_generator",
            ArchSpec::DeepvoxGenerator {
                widths: vec![2, 3],
                residual_blocks: 1,
            },
            4,
        ),
        (
            "net/deepvox_discriminator",
            ArchSpec::DeepvoxDiscriminator {
                widths: vec![2, 2, 3],
                convs: vec![1, 1, 2],
            },
            6,
        ),
        ("net/deepaaa", ArchSpec::Deepaaa { widths: vec![2, 3] }, 4),
        (
            "net/unet3d_fixed",
            ArchSpec::Unet3dFixed {
                widths: vec![2, 3],
                fixed_z: 4,
            },
            4,
        ),
        (
            "net/savect",
            ArchSpec::Savect {
                widths: vec![2, 3],
                convs: vec![1, 2],
            },
            5,
        ),
    ];
    for (i, (name, spec, xy)) in nets.into_iter().enumerate() {
        out.push(run_op(name, 30 + i as u64, move |r, s| {
            let spec = match &spec {
                ArchSpec::Unet3dFixed { widths, .. } => ArchSpec::Unet3dFixed {
                    widths: widths.clone(),
                    fixed_z: 2 * r.gen_range(1..=3),
                },
                other => other.clone(),
            };
            network_case(r, s, spec, xy)
        }));
    }
    out
}

pub fn passes(reports: &[OpReport]) -> bool {
    reports.iter().all(|r| r.shapes >= SHAPES_PER_OP && r.worst < REL_TOL)
}
