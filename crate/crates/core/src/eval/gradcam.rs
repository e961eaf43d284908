use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::volio::{MaskVolume, Volume, VolumeKind};

/// Class-activation volume of `layer` (default: the last convolution) for a
/// classifier run on `input`, at the input's resolution and min-max
/// normalized to [0, 1]. A constant raw map gives all zeros.
pub fn gradcam3d(net: &Network<f32>, input: &MaskVolume, layer: Option<&str>) -> Result<Volume> {
    let layer = match layer {
        Some(l) => l.to_string(),
        None => net
            .last_conv_layer()
            .ok_or_else(|| Error::LayerNotFound("<last conv>".into()))?
            .to_string(),
    };
    let [nx, ny, nz] = input.dims();
    let x = Tensor::new(vec![1, 1, nz, ny, nx], input.data().iter().map(|&b| b as f32).collect())?;
    let mut tape = Tape::new();
    // the input is a leaf so activations carry gradients while weights stay constant
    let xv = tape.param(x);
    let out = net.forward(&mut tape, xv, false, Some(&layer))?;
    let act = out
        .captured
        .ok_or_else(|| Error::LayerNotFound(format!("{layer} has no spatial activation")))?;
    let score = tape.sum(out.logit);
    let grads = tape.backward_retain(score, &[act])?;
    let a = tape.value(act);
    let [_, c, d, h, w] = a.dims5()?;
    let plane = d * h * w;
    let zeros = Tensor::zeros(a.shape().to_vec());
    let g = grads.get(act).unwrap_or(&zeros);
    let mut raw = vec![0f64; plane];
    for k in 0..c {
        let gk = &g.data()[k * plane..(k + 1) * plane];
        let alpha = gk.iter().map(|v| v.f64()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (r, v) in raw.iter_mut().zip(&a.data()[k * plane..(k + 1) * plane]) {
            *r += alpha * v.f64();
        }
    }
    raw.iter_mut().for_each(|r| *r = r.max(0.0));
    let up = upsample_nearest(&raw, [w, h, d], [nx, ny, nz]);
    Volume::new(input.geometry().clone(), VolumeKind::Windowed, min_max(&up))
}

fn upsample_nearest(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let map = |i: usize, a: usize| (((i as f64 + 0.5) * from[a] as f64 / to[a] as f64) as usize).min(from[a] - 1);
    let mut out = Vec::with_capacity(to.iter().product());
    for z in 0..to[2] {
        let sz = map(z, 2);
        for y in 0..to[1] {
            let sy = map(y, 1);
            for x in 0..to[0] {
                out.push(src[map(x, 0) + from[0] * (sy + from[1] * sz)]);
            }
        }
    }
    out
}

fn min_max(v: &[f64]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| ((x - lo) / (hi - lo)) as f32).collect()
}
