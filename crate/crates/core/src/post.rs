//! Postprocessing of predicted probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets `(dx, dy, dz)` that precede the current voxel in
    /// raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=0 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if !before {
                        continue;
                    }
                    let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => nonzero <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostConfig {
    pub threshold: f64,
    pub connectivity: Connectivity,
    pub min_component_frac: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            threshold: 0.5,
            connectivity: Connectivity::TwentySix,
            min_component_frac: 0.05,
        }
    }
}

/// Component labels: 0 is background, components are numbered `1..=n` in
/// raster order of their first voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabels {
    pub labels: Vec<u32>,
    /// `sizes[i]` is the voxel count of label `i + 1`.
    pub sizes: Vec<usize>,
}

impl ComponentLabels {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// `voxel >= t → 1`.
pub fn binarize(p: &Volume, t: f64) -> Result<MaskVolume> {
    let t = t as f32;
    let data = p.data().iter().map(|&v| (v >= t) as u8).collect();
    MaskVolume::new(p.geometry().clone(), data)
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let next = parent[a as usize];
        parent[a as usize] = parent[next as usize];
        a = next;
    }
    a
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling.
pub fn connected_components(m: &MaskVolume, connectivity: Connectivity) -> ComponentLabels {
    let [nx, ny, nz] = m.dims();
    let data = m.data();
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![0u32; data.len()];
    // parent[0] is unused so provisional label 0 can mean background
    let mut parent: Vec<u32> = vec![0];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if data[i] == 0 {
                    continue;
                }
                let mut current = 0u32;
                for &[dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let q = qx as usize + nx * (qy as usize + ny * qz as usize);
                    let l = provisional[q];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else if current != l {
                        union(&mut parent, current, l);
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                provisional[i] = current;
            }
        }
    }

    let mut dense = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = provisional;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if dense[root] == 0 {
            sizes.push(0);
            dense[root] = sizes.len() as u32;
        }
        *l = dense[root];
        sizes[*l as usize - 1] += 1;
    }
    ComponentLabels { labels, sizes }
}

/// Drops components smaller than `threshold_frac` of the total foreground
/// (strict `<`, measured before removal).
pub fn remove_small(m: &MaskVolume, threshold_frac: f64, connectivity: Connectivity) -> Result<MaskVolume> {
    if !(0.0..=1.0).contains(&threshold_frac) {
        return Err(Error::InvalidConfig(format!(
            "threshold_frac must be in [0, 1], got {threshold_frac}"
        )));
    }
    let cc = connected_components(m, connectivity);
    let total: usize = cc.sizes.iter().sum();
    let min = threshold_frac * total as f64;
    let keep: Vec<bool> = cc.sizes.iter().map(|&s| (s as f64) >= min).collect();
    let data = cc
        .labels
        .iter()
        .map(|&l| (l != 0 && keep[l as usize - 1]) as u8)
        .collect();
    m.rebuild(m.geometry().clone(), data)
}
