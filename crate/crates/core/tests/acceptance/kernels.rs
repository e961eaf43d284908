//! Brute-force oracles for the convolution, pooling, labeling and
//! resampling kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxpipe::post::{connected_components, Connectivity};
use voxpipe::prep::{resample_mask_nn, resample_nn, reshape_z};
use voxpipe::tensor::{Padding, Tape, Tensor};
use voxpipe::volio::{Geometry, MaskVolume, Orientation, Volume, VolumeKind};

pub const INSTANCES: usize = 50;

pub struct KernelReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tol: f64,
}

impl KernelReport {
    pub fn ok(&self) -> bool {
        self.instances >= INSTANCES && self.worst <= self.tol
    }
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Output extent and low padding of a `same` window.
fn same(input: usize, k: usize, s: usize) -> (usize, usize) {
    let out = input.div_ceil(s);
    let need = ((out - 1) * s + k).saturating_sub(input);
    (out, need / 2)
}

#[allow(clippy::too_many_arguments)]
fn direct_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    d: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    padding: Padding,
) -> (Vec<f64>, [usize; 3]) {
    let mut o = [0; 3];
    let mut p = [0; 3];
    for a in 0..3 {
        (o[a], p[a]) = match padding {
            Padding::Same => same(d[a], k[a], s[a]),
            Padding::Valid => ((d[a] - k[a]) / s[a] + 1, 0),
        };
    }
    let mut y = vec![0.0; n * cout * o[0] * o[1] * o[2]];
    let xi =
        |bn: usize, c: usize, z: usize, yy: usize, xx: usize| (((bn * cin + c) * d[0] + z) * d[1] + yy) * d[2] + xx;
    for bn in 0..n {
        for co in 0..cout {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let iz = (oz * s[0] + kz) as isize - p[0] as isize;
                                        let iy = (oy * s[1] + ky) as isize - p[1] as isize;
                                        let ix = (ox * s[2] + kx) as isize - p[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d[0] || iy >= d[1] || ix >= d[2] {
                                            continue;
                                        }
                                        let wi = (((co * cin + ci) * k[0] + kz) * k[1] + ky) * k[2] + kx;
                                        acc += w[wi] * x[xi(bn, ci, iz, iy, ix)];
                                    }
                                }
                            }
                        }
                        y[(((bn * cout + co) * o[0] + oz) * o[1] + oy) * o[2] + ox] = acc;
                    }
                }
            }
        }
    }
    (y, o)
}

fn conv_oracle() -> KernelReport {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=3));
        let s: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let d: [usize; 3] = std::array::from_fn(|a| r.gen_range(k[a]..=k[a] + 5));
        let padding = if i % 2 == 0 { Padding::Same } else { Padding::Valid };
        let x = rand_vec(&mut r, n * cin * d.iter().product::<usize>());
        let w = rand_vec(&mut r, cout * cin * k.iter().product::<usize>());
        let b = rand_vec(&mut r, cout);
        let (want, o) = direct_conv(&x, &w, &b, n, cin, cout, d, k, s, padding);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![n, cin, d[0], d[1], d[2]], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![cout, cin, k[0], k[1], k[2]], w).unwrap());
        let bv = tape.constant(Tensor::new(vec![cout], b).unwrap());
        let y = tape.conv3d(xv, wv, Some(bv), s, padding).unwrap();
        assert_eq!(tape.shape(y), [n, cout, o[0], o[1], o[2]]);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            worst = worst.max((a - e).abs());
        }
    }
    KernelReport {
        name: "conv3d vs direct loops",
        instances: INSTANCES,
        worst,
        tol: 1e-10,
    }
}

/// `⟨conv(x, w), y⟩ = ⟨x, conv_transpose(y, w)⟩`.
fn adjoint_identity() -> KernelReport {
    let mut r = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (n, c_small, c_big) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=3));
        let s: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let small: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=4));
        let big: [usize; 3] = std::array::from_fn(|a| small[a] * s[a]);
        let x = Tensor::new(
            vec![n, c_big, big[0], big[1], big[2]],
            rand_vec(&mut r, n * c_big * big.iter().product::<usize>()),
        )
        .unwrap();
        let y = Tensor::new(
            vec![n, c_small, small[0], small[1], small[2]],
            rand_vec(&mut r, n * c_small * small.iter().product::<usize>()),
        )
        .unwrap();
        let w = Tensor::new(
            vec![c_small, c_big, k[0], k[1], k[2]],
            rand_vec(&mut r, c_small * c_big * k.iter().product::<usize>()),
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, yv, wv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(w));
        let cx = tape.conv3d(xv, wv, None, s, Padding::Same).unwrap();
        let ty = tape.conv3d_transpose(yv, wv, None, s).unwrap();
        assert_eq!(tape.shape(cx), y.shape());
        assert_eq!(tape.shape(ty), x.shape());
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs());
    }
    KernelReport {
        name: "conv3d_transpose adjoint identity",
        instances: INSTANCES,
        worst,
        tol: 1e-8,
    }
}

fn maxpool_oracle() -> KernelReport {
    let mut r = ChaCha8Rng::seed_from_u64(103);
    let mut mismatches = 0usize;
    for _ in 0..INSTANCES {
        let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
        let win: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=3));
        let st: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let d: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=7));
        let x = rand_vec(&mut r, n * c * d.iter().product::<usize>());
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![n, c, d[0], d[1], d[2]], x.clone()).unwrap());
        let yv = tape.maxpool3d(xv, win, st).unwrap();
        let got = tape.value(yv).data().to_vec();
        let mut o = [0; 3];
        let mut p = [0; 3];
        for a in 0..3 {
            (o[a], p[a]) = same(d[a], win[a], st[a]);
        }
        let mut want = Vec::new();
        for nc in 0..n * c {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut m = f64::NEG_INFINITY;
                        for kz in 0..win[0] {
                            for ky in 0..win[1] {
                                for kx in 0..win[2] {
                                    let iz = (oz * st[0] + kz) as isize - p[0] as isize;
                                    let iy = (oy * st[1] + ky) as isize - p[1] as isize;
                                    let ix = (ox * st[2] + kx) as isize - p[2] as isize;
                                    if iz >= 0
                                        && iy >= 0
                                        && ix >= 0
                                        && (iz as usize) < d[0]
                                        && (iy as usize) < d[1]
                                        && (ix as usize) < d[2]
                                    {
                                        let i = ((nc * d[0] + iz as usize) * d[1] + iy as usize) * d[2] + ix as usize;
                                        m = m.max(x[i]);
                                    }
                                }
                            }
                        }
                        want.push(m);
                    }
                }
            }
        }
        if got != want {
            mismatches += 1;
        }
    }
    KernelReport {
        name: "maxpool3d vs window scan",
        instances: INSTANCES,
        worst: mismatches as f64,
        tol: 0.0,
    }
}

/// Stack flood fill numbering components in raster order of their first voxel.
fn flood_fill(data: &[u8], dims: [usize; 3], conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut offsets = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                let keep = match conn {
                    Connectivity::Six => nonzero == 1,
                    Connectivity::Eighteen => (1..=2).contains(&nonzero),
                    Connectivity::TwentySix => nonzero >= 1,
                };
                if keep {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut stack = vec![start];
        labels[start] = label;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
            for &(dx, dy, dz) in &offsets {
                let (a, b, c) = (x + dx, y + dy, z + dz);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let j = a as usize + nx * (b as usize + ny * c as usize);
                if data[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

fn components_oracle() -> KernelReport {
    let mut r = ChaCha8Rng::seed_from_u64(104);
    let mut mismatches = 0usize;
    for i in 0..INSTANCES {
        let dims = if i < 10 {
            [32, 32, 32]
        } else {
            std::array::from_fn(|_| r.gen_range(1..=12))
        };
        let density = r.gen_range(0.05..0.6);
        let g = Geometry::new(dims, [1.0; 3], Orientation::Hfs).unwrap();
        let data: Vec<u8> = (0..g.len()).map(|_| r.gen_bool(density) as u8).collect();
        let m = MaskVolume::new(g, data.clone()).unwrap();
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let got = connected_components(&m, conn);
            let (labels, sizes) = flood_fill(&data, dims, conn);
            if got.labels != labels || got.sizes != sizes {
                mismatches += 1;
            }
        }
    }
    KernelReport {
        name: "connected_components vs flood fill (6/18/26)",
        instances: INSTANCES,
        worst: mismatches as f64,
        tol: 0.0,
    }
}

/// Source index of output voxel `j`: the input voxel containing its center.
fn nearest(j: usize, in_len: usize, in_sp: f64, out_sp: f64) -> usize {
    let center_mm = (j as f64 + 0.5) * out_sp;
    ((center_mm / in_sp).floor() as usize).min(in_len - 1)
}

fn resample_oracle() -> KernelReport {
    let mut r = ChaCha8Rng::seed_from_u64(105);
    let mut mismatches = 0usize;
    for _ in 0..INSTANCES {
        let dims: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=9));
        let spacing: [f64; 3] = std::array::from_fn(|_| [0.5, 1.0, 1.5, 2.0, 3.0][r.gen_range(0..5)]);
        let target: [f64; 3] = std::array::from_fn(|_| [0.7, 1.0, 2.0, 2.5, 3.0, 4.0][r.gen_range(0..6)]);
        let out: [usize; 3] = std::array::from_fn(|a| (dims[a] as f64 * spacing[a] / target[a]).round() as usize);
        if out.contains(&0) {
            continue_with_degenerate(&mut mismatches, dims, spacing, target);
            continue;
        }
        let g = Geometry::new(dims, spacing, Orientation::Hfs).unwrap();
        let v = Volume::new(g.clone(), VolumeKind::Hu, (0..g.len()).map(|i| i as f32).collect()).unwrap();
        let m = MaskVolume::new(g.clone(), (0..g.len()).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let rv = resample_nn(&v, target).unwrap();
        let rm = resample_mask_nn(&m, target).unwrap();
        let mut ok = rv.dims() == out && rm.dims() == out;
        if ok {
            for z in 0..out[2] {
                for y in 0..out[1] {
                    for x in 0..out[0] {
                        let (sx, sy, sz) = (
                            nearest(x, dims[0], spacing[0], target[0]),
                            nearest(y, dims[1], spacing[1], target[1]),
                            nearest(z, dims[2], spacing[2], target[2]),
                        );
                        let src = sx + dims[0] * (sy + dims[1] * sz);
                        ok &= rv.get(x, y, z) == src as f32 && rm.get(x, y, z) == m.data()[src];
                    }
                }
            }
        }
        if !ok {
            mismatches += 1;
        }

        let nz = r.gen_range(1..=20);
        let rz = reshape_z(&v, nz).unwrap();
        let mut ok = rz.dims() == [dims[0], dims[1], nz];
        if ok {
            for z in 0..nz {
                let sz = ((z as f64 + 0.5) * dims[2] as f64 / nz as f64).floor() as usize;
                let sz = sz.min(dims[2] - 1);
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        ok &= rz.get(x, y, z) == v.get(x, y, sz);
                    }
                }
            }
        }
        if !ok {
            mismatches += 1;
        }
    }
    KernelReport {
        name: "resample_nn / reshape_z vs index oracle",
        instances: INSTANCES,
        worst: mismatches as f64,
        tol: 0.0,
    }
}

/// Zero output extents must be rejected rather than produce an empty grid.
fn continue_with_degenerate(mismatches: &mut usize, dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) {
    let g = Geometry::new(dims, spacing, Orientation::Hfs).unwrap();
    let v = Volume::new(g.clone(), VolumeKind::Hu, vec![0.0; g.len()]).unwrap();
    if resample_nn(&v, target).is_ok() {
        *mismatches += 1;
    }
}

pub fn all() -> Vec<KernelReport> {
    vec![
        conv_oracle(),
        adjoint_identity(),
        maxpool_oracle(),
        components_oracle(),
        resample_oracle(),
    ]
}
