//! Synthetic thoracic CT phantoms: a candy-cane aorta (ascending segment,
//! arch, descending segment) with optional fusiform aneurysm, surrounded by a
//! thin fat sheath, next to a spine cylinder and two lungs.
//!
//! Physical coordinates are millimetres with the centre of voxel `(0, 0, 0)`
//! at the origin; z grows towards the head, so slice 0 is the most inferior.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volio::{write_nrrd, Encoding, Geometry, Group, MaskVolume, Orientation, ScanMeta, Volume, VolumeKind};

/// Diameter ratio at and above which a case is labeled aneurysmal.
pub const ANEURYSM_RATIO: f64 = 1.5;

/// Group proportions of the reference cohort (LD, SD, CTA, AN, ANNC).
pub const GROUP_MIX: [usize; 5] = [150, 150, 150, 119, 18];

const RESCALE_INTERCEPT: f64 = -1024.0;
const ARCH_RADIUS_MM: f64 = 35.0;
const ASCENDING_MM: f64 = 50.0;
const APEX_BELOW_TOP_MM: f64 = 15.0;
const JITTER_MM: f64 = 4.0;
const RADIUS_VARIATION: f64 = 0.10;
const WALL_MM: f64 = 2.0;
const STEP_MM: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AneurysmSite {
    Any,
    Ascending,
    Arch,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Cohort size used by `gen-data`.
    pub n_total: usize,
    pub xy: usize,
    /// Inclusive range the slice count is drawn from.
    pub nz_range: [usize; 2],
    pub spacing: [f64; 3],
    pub base_radius_mm: f64,
    pub aneurysm_ratio_range: [f64; 2],
    /// Axial extent of the bulge (±2σ of its Gaussian profile).
    pub aneurysm_length_mm: [f64; 2],
    pub aneurysm_site: AneurysmSite,
    pub lumen_hu_contrast: f64,
    pub lumen_hu_plain: f64,
    pub wall_hu: f64,
    pub fat_hu: f64,
    pub fat_mm: f64,
    pub spine_hu: f64,
    pub lung_hu: f64,
    pub background_hu: f64,
    pub noise_sigma_low_dose: f64,
    pub noise_sigma_standard: f64,
    /// Relative group sizes in the order LD, SD, CTA, AN, ANNC.
    pub group_mix: [usize; 5],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_total: 120,
            xy: 128,
            nz_range: [40, 96],
            spacing: [2.0, 2.0, 3.0],
            base_radius_mm: 15.0,
            aneurysm_ratio_range: [1.5, 2.2],
            aneurysm_length_mm: [30.0, 60.0],
            aneurysm_site: AneurysmSite::Any,
            lumen_hu_contrast: 300.0,
            lumen_hu_plain: 40.0,
            wall_hu: 50.0,
            fat_hu: -100.0,
            fat_mm: 3.0,
            spine_hu: 700.0,
            lung_hu: -800.0,
            background_hu: 30.0,
            noise_sigma_low_dose: 40.0,
            noise_sigma_standard: 15.0,
            group_mix: GROUP_MIX,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.xy < 16 {
            return bad(format!("phantom.xy must be >= 16, got {}", self.xy));
        }
        let [lo, hi] = self.nz_range;
        if lo < 4 || hi < lo {
            return bad(format!(
                "phantom.nz_range {:?} must satisfy 4 <= lo <= hi",
                self.nz_range
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) || !(self.base_radius_mm > WALL_MM) {
            return bad("phantom spacing must be positive and base_radius_mm > 2".into());
        }
        let [rlo, rhi] = self.aneurysm_ratio_range;
        if !(rlo >= ANEURYSM_RATIO) || rhi < rlo {
            return bad(format!(
                "phantom.aneurysm_ratio_range {:?} must satisfy {ANEURYSM_RATIO} <= lo <= hi",
                self.aneurysm_ratio_range
            ));
        }
        let [llo, lhi] = self.aneurysm_length_mm;
        if !(llo > 0.0) || lhi < llo {
            return bad(format!(
                "phantom.aneurysm_length_mm {:?} is invalid",
                self.aneurysm_length_mm
            ));
        }
        if !(self.noise_sigma_low_dose >= 0.0) || !(self.noise_sigma_standard >= 0.0) || !(self.fat_mm >= 0.0) {
            return bad("noise sigmas and fat_mm must be >= 0".into());
        }
        if self.group_mix.iter().sum::<usize>() == 0 {
            return bad("phantom.group_mix must not be all zero".into());
        }
        Ok(())
    }

    pub fn noise_sigma(&self, group: Group) -> f64 {
        if group.low_dose() {
            self.noise_sigma_low_dose
        } else {
            self.noise_sigma_standard
        }
    }

    pub fn lumen_hu(&self, group: Group) -> f64 {
        if group.contrast() {
            self.lumen_hu_contrast
        } else {
            self.lumen_hu_plain
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AneurysmInfo {
    pub site: AneurysmSite,
    /// Centre of the bulge on the centerline, mm.
    pub center_mm: [f64; 3],
    /// Tube radius at the centre without the bulge.
    pub baseline_radius_mm: f64,
    pub ratio: f64,
    pub length_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub seed: u64,
    pub group: Group,
    pub label: u8,
    pub max_diameter_ratio: f64,
    pub volume: Volume,
    pub meta: ScanMeta,
    pub mask: MaskVolume,
    pub aneurysm: Option<AneurysmInfo>,
}

/// Smooth periodic field bounded by `amp` in absolute value.
struct Wiggle {
    terms: [(f64, f64, f64); 3],
}

impl Wiggle {
    fn draw(rng: &mut impl Rng, amp: f64) -> Wiggle {
        let raw: [(f64, f64, f64); 3] =
            std::array::from_fn(|k| (rng.gen::<f64>(), (k + 1) as f64, rng.gen::<f64>() * 2.0 * PI));
        let total: f64 = raw.iter().map(|t| t.0).sum::<f64>().max(1e-12);
        Wiggle {
            terms: raw.map(|(a, f, p)| (a / total * amp, f, p)),
        }
    }

    fn at(&self, u: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, f, p)| a * (2.0 * PI * f * u + p).sin())
            .sum()
    }
}

struct Sample {
    p: [f64; 3],
    r: f64,
}

struct Centerline {
    samples: Vec<Sample>,
    aneurysm: Option<AneurysmInfo>,
}

/// Position at arc length `s` of the unjittered candy cane.
fn cane_point(s: f64, pa: [f64; 2], pd: [f64; 2], z_c: f64, r_arch: f64) -> [f64; 3] {
    let arch_len = PI * r_arch;
    if s <= ASCENDING_MM {
        [pa[0], pa[1], z_c - ASCENDING_MM + s]
    } else if s <= ASCENDING_MM + arch_len {
        let th = (s - ASCENDING_MM) / r_arch;
        let m = [(pa[0] + pd[0]) / 2.0, (pa[1] + pd[1]) / 2.0];
        let c = th.cos();
        [
            m[0] + (pa[0] - m[0]) * c,
            m[1] + (pa[1] - m[1]) * c,
            z_c + r_arch * th.sin(),
        ]
    } else {
        [pd[0], pd[1], z_c - (s - ASCENDING_MM - arch_len)]
    }
}

fn build_centerline(cfg: &PhantomConfig, group: Group, dims: [usize; 3], rng: &mut impl Rng) -> Centerline {
    let sp = cfg.spacing;
    let cx = (dims[0] - 1) as f64 * sp[0] / 2.0;
    let cy = (dims[1] - 1) as f64 * sp[1] / 2.0;
    let top = (dims[2] - 1) as f64 * sp[2];
    // ascending anterior and slightly right, descending posterior-left
    let pa = [cx + 5.0, cy - 30.0];
    let pd = [cx - 28.0, cy + 30.0];
    let r_arch = ((pd[0] - pa[0]).powi(2) + (pd[1] - pa[1]).powi(2)).sqrt() / 2.0;
    debug_assert!((r_arch - ARCH_RADIUS_MM).abs() < 2.0);
    let z_c = top - APEX_BELOW_TOP_MM - r_arch;
    let arch_len = PI * r_arch;
    // descending segment runs a little past the bottom slice so it is open there
    let desc_len = z_c + 3.0 * cfg.base_radius_mm;
    let total = ASCENDING_MM + arch_len + desc_len;

    let jx = Wiggle::draw(rng, JITTER_MM / 2f64.sqrt());
    let jy = Wiggle::draw(rng, JITTER_MM / 2f64.sqrt());
    let rv = Wiggle::draw(rng, RADIUS_VARIATION);

    let aneurysm_params = (group.label() == 1).then(|| {
        let site = match cfg.aneurysm_site {
            AneurysmSite::Any => {
                [AneurysmSite::Ascending, AneurysmSite::Arch, AneurysmSite::Descending][rng.gen_range(0..3)]
            }
            s => s,
        };
        let s0 = match site {
            AneurysmSite::Ascending => ASCENDING_MM * rng.gen_range(0.55..0.9),
            AneurysmSite::Arch => ASCENDING_MM + arch_len * rng.gen_range(0.3..0.7),
            _ => ASCENDING_MM + arch_len + z_c * rng.gen_range(0.3..0.65),
        };
        let [llo, lhi] = cfg.aneurysm_length_mm;
        let length = if lhi > llo { rng.gen_range(llo..=lhi) } else { llo };
        let [rlo, rhi] = cfg.aneurysm_ratio_range;
        let ratio = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
        (site, s0, length, ratio)
    });

    let base_r = |s: f64| cfg.base_radius_mm * (1.0 + rv.at(s / total));
    let point = |s: f64| {
        let p = cane_point(s, pa, pd, z_c, r_arch);
        let u = s / total;
        [p[0] + jx.at(u), p[1] + jy.at(u), p[2]]
    };
    let n = (total / STEP_MM).ceil() as usize;
    let samples = (0..=n)
        .map(|i| {
            let s = i as f64 * STEP_MM;
            let mut r = base_r(s);
            if let Some((_, s0, length, ratio)) = aneurysm_params {
                let sigma = length / 4.0;
                r *= 1.0 + (ratio - 1.0) * (-(s - s0).powi(2) / (2.0 * sigma * sigma)).exp();
            }
            Sample { p: point(s), r }
        })
        .collect();
    let aneurysm = aneurysm_params.map(|(site, s0, length, ratio)| AneurysmInfo {
        site,
        center_mm: point(s0),
        baseline_radius_mm: base_r(s0),
        ratio,
        length_mm: length,
    });
    Centerline { samples, aneurysm }
}

/// Signed distance (mm) to the swept-sphere tube surface, negative inside,
/// clamped to `reach` outside.
fn tube_distance(cl: &Centerline, geom: &Geometry, reach: f64) -> Vec<f32> {
    let [nx, ny, _] = geom.dims;
    let sp = geom.spacing;
    let mut sd = vec![reach as f32; geom.len()];
    for smp in &cl.samples {
        let ext = smp.r + reach;
        let range = |a: usize| {
            let lo = ((smp.p[a] - ext) / sp[a]).floor().max(0.0) as usize;
            let hi = ((smp.p[a] + ext) / sp[a]).ceil().min((geom.dims[a] as f64) - 1.0);
            (lo, hi)
        };
        let ((x0, x1), (y0, y1), (z0, z1)) = (range(0), range(1), range(2));
        if x1 < 0.0 || y1 < 0.0 || z1 < 0.0 {
            continue;
        }
        for z in z0..=z1 as usize {
            let dz = z as f64 * sp[2] - smp.p[2];
            for y in y0..=y1 as usize {
                let dy = y as f64 * sp[1] - smp.p[1];
                let row = nx * (y + ny * z);
                for x in x0..=x1 as usize {
                    let dx = x as f64 * sp[0] - smp.p[0];
                    let d = ((dx * dx + dy * dy + dz * dz).sqrt() - smp.r) as f32;
                    let cell = &mut sd[row + x];
                    if d < *cell {
                        *cell = d;
                    }
                }
            }
        }
    }
    sd
}

/// Renders one case. Deterministic in `(cfg, group, seed)`.
pub fn make_phantom(cfg: &PhantomConfig, group: Group, seed: u64) -> Result<CaseRecord> {
    make_phantom_with_id(cfg, group, seed, format!("phantom_{seed:016x}"))
}

fn make_phantom_with_id(cfg: &PhantomConfig, group: Group, seed: u64, id: String) -> Result<CaseRecord> {
    cfg.validate()?;
    let mut geo_rng = seed::rng(seed::derive(seed, "geometry"));
    let mut noise_rng = seed::rng(seed::derive(seed, "noise"));
    let nz = geo_rng.gen_range(cfg.nz_range[0]..=cfg.nz_range[1]);
    let dims = [cfg.xy, cfg.xy, nz];
    let geom = Geometry::new(dims, cfg.spacing, Orientation::Hfs)?;
    let cl = build_centerline(cfg, group, dims, &mut geo_rng);

    let sd = tube_distance(&cl, &geom, cfg.fat_mm + 1.0);
    let sp = cfg.spacing;
    let cx = (dims[0] - 1) as f64 * sp[0] / 2.0;
    let cy = (dims[1] - 1) as f64 * sp[1] / 2.0;
    let top = (dims[2] - 1) as f64 * sp[2];
    let spine = [cx + 2.0, cy + 50.0];
    let spine_r = 12.0;
    let lungs = [[cx - 62.0, cy + 5.0], [cx + 62.0, cy + 5.0]];
    let lung_axes = [32.0, 55.0, (top / 2.0).max(1.0) * 1.1];

    let lumen_hu = cfg.lumen_hu(group);
    let mut hu = vec![0f64; geom.len()];
    let mut mask = vec![0u8; geom.len()];
    for z in 0..nz {
        let pz = z as f64 * sp[2];
        for y in 0..dims[1] {
            let py = y as f64 * sp[1];
            for x in 0..dims[0] {
                let px = x as f64 * sp[0];
                let i = geom.index(x, y, z);
                let d = sd[i] as f64;
                let mut v = cfg.background_hu;
                for l in &lungs {
                    let q = ((px - l[0]) / lung_axes[0]).powi(2)
                        + ((py - l[1]) / lung_axes[1]).powi(2)
                        + ((pz - top / 2.0) / lung_axes[2]).powi(2);
                    if q <= 1.0 {
                        v = cfg.lung_hu;
                    }
                }
                if (px - spine[0]).powi(2) + (py - spine[1]).powi(2) <= spine_r * spine_r {
                    v = cfg.spine_hu;
                }
                if d <= cfg.fat_mm {
                    v = cfg.fat_hu;
                }
                if d <= 0.0 {
                    mask[i] = 1;
                    v = if d <= -WALL_MM { lumen_hu } else { cfg.wall_hu };
                }
                hu[i] = v;
            }
        }
    }

    let sigma = cfg.noise_sigma(group);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let raw: Vec<f32> = hu
        .iter()
        .map(|&h| {
            let n = if sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            ((h + n).round() - RESCALE_INTERCEPT).clamp(i16::MIN as f64, i16::MAX as f64) as f32
        })
        .collect();

    let label = group.label();
    let meta = ScanMeta {
        rescale_slope: 1.0,
        rescale_intercept: RESCALE_INTERCEPT,
        group,
        label,
    };
    Ok(CaseRecord {
        id,
        seed,
        group,
        label,
        max_diameter_ratio: cl.aneurysm.map_or(1.0, |a| a.ratio),
        volume: Volume::new(geom.clone(), VolumeKind::Raw, raw)?,
        meta,
        mask: MaskVolume::new(geom, mask)?,
        aneurysm: cl.aneurysm,
    })
}

/// Largest-remainder apportionment of `n` over `weights`; ties go to the
/// lower index.
pub fn largest_remainder(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| ((n * w) % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = counts.iter().sum();
    for &(_, i) in rem.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub group: Group,
    pub label: u8,
    pub nz: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl ManifestRow {
    pub fn of(c: &CaseRecord) -> ManifestRow {
        ManifestRow {
            id: c.id.clone(),
            group: c.group,
            label: c.label,
            nz: c.volume.dims()[2],
            ratio: c.max_diameter_ratio,
            seed: c.seed,
        }
    }
}

/// Case ids, groups and seeds of a cohort, without rendering.
pub fn cohort_plan(cfg: &PhantomConfig, n_total: usize, seed: u64) -> Result<Vec<(String, Group, u64)>> {
    cfg.validate()?;
    if n_total < 5 {
        return Err(Error::InvalidConfig(format!("n_total must be >= 5, got {n_total}")));
    }
    let counts = largest_remainder(n_total, &cfg.group_mix);
    let mut plan = Vec::with_capacity(n_total);
    for (g, &count) in Group::ALL.iter().zip(&counts) {
        for _ in 0..count {
            let i = plan.len();
            plan.push((format!("case{i:04}"), *g, seed::derive_indexed(seed, "case", i as u64)));
        }
    }
    Ok(plan)
}

pub fn make_cohort(cfg: &PhantomConfig, n_total: usize, seed: u64) -> Result<(Vec<CaseRecord>, Vec<ManifestRow>)> {
    let plan = cohort_plan(cfg, n_total, seed)?;
    let cases = plan
        .into_par_iter()
        .map(|(id, g, s)| make_phantom_with_id(cfg, g, s, id))
        .collect::<Result<Vec<_>>>()?;
    let manifest = cases.iter().map(ManifestRow::of).collect();
    Ok((cases, manifest))
}

/// `<dir>/<id>.nrrd`, `<dir>/<id>.mask.nrrd`, `<dir>/<id>.meta.json`.
pub fn write_case(dir: &Path, case: &CaseRecord, encoding: Encoding) -> Result<()> {
    write_nrrd(case.volume.clone(), dir.join(format!("{}.nrrd", case.id)), encoding)?;
    write_nrrd(case.mask.clone(), dir.join(format!("{}.mask.nrrd", case.id)), encoding)?;
    case.meta.write(dir.join(format!("{}.meta.json", case.id)))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Renders and writes a cohort case by case, returning its manifest.
pub fn generate_cohort_to_dir(
    cfg: &PhantomConfig,
    n_total: usize,
    seed: u64,
    dir: &Path,
    encoding: Encoding,
) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plan = cohort_plan(cfg, n_total, seed)?;
    let rows = plan
        .into_par_iter()
        .map(|(id, g, s)| {
            let case = make_phantom_with_id(cfg, g, s, id)?;
            write_case(dir, &case, encoding)?;
            Ok(ManifestRow::of(&case))
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}
