//! Seed-deterministic synthesis of faceted, strained nanocrystals.
//!
//! A crystal is the intersection of a cubic block with randomly oriented
//! half-spaces. The block is centered in the box and never larger than the
//! central half of each axis, so every sample is oversampled at least 2x.
//! Lattice distortion is an affine strain of at most 1% plus a smooth random
//! displacement; the phase is the displacement projected on a Bragg vector.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{simulate_diffraction, ForwardConfig};
use crate::volume::{gaussian_blur_f64, wrap_phase, Dims, GridSpec, RealVolume};

/// Subsamples per voxel edge for fractional occupancy.
const SUBSAMPLES: usize = 4;

/// Half-space `{x : normal . (x - center) <= distance}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipPlane {
    pub normal: [f64; 3],
    /// Lattice units from the crystal center.
    pub distance: f64,
}

impl ClipPlane {
    pub fn new(normal: [f64; 3], distance: f64) -> Result<Self> {
        let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument {
                op: "ClipPlane",
                msg: format!("normal must be unit length, got norm {norm}"),
            });
        }
        if !(distance >= 0.0 && distance.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "ClipPlane",
                msg: format!("distance must be non-negative, got {distance}"),
            });
        }
        Ok(Self { normal, distance })
    }

    #[inline]
    fn contains(&self, rel: [f64; 3]) -> bool {
        self.normal[0] * rel[0] + self.normal[1] * rel[1] + self.normal[2] * rel[2] <= self.distance
    }
}

/// Reciprocal-lattice vector used to turn displacement into phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BraggVector {
    pub g: [f64; 3],
}

impl Default for BraggVector {
    /// `2 pi (1, 1, 1)` in normalized lattice units.
    fn default() -> Self {
        Self { g: [TAU; 3] }
    }
}

/// Knobs for [`generate_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalConfig {
    pub grid: GridSpec,
    pub min_planes: usize,
    pub max_planes: usize,
    /// Plane distances are drawn from `[lo, hi] * R`, `R` the block half-extent.
    pub distance_range: [f64; 2],
    /// Bound on each engineering-strain component.
    pub max_strain: f64,
    pub random_field_amplitude: f64,
    /// Gaussian sigma in voxels.
    pub random_field_smoothness: f64,
    /// Lattice units of vacuum kept on each side of the box.
    pub box_padding: f64,
    pub include_strain: bool,
    /// Reject crystals occupying less than this fraction of the block.
    pub min_occupancy_fraction: f64,
    pub max_attempts: usize,
}

impl Default for CrystalConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            min_planes: 4,
            max_planes: 20,
            distance_range: [0.25, 0.9],
            max_strain: 0.01,
            random_field_amplitude: 0.05,
            random_field_smoothness: 3.0,
            box_padding: 5.0,
            include_strain: true,
            min_occupancy_fraction: 0.05,
            max_attempts: 64,
        }
    }
}

/// Complete recipe for one crystal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalSpec {
    pub seed: u64,
    pub n_planes: usize,
    pub planes: Vec<ClipPlane>,
    /// Symmetric strain tensor; off-diagonals are half the engineering shear.
    pub affine_strain: [[f64; 3]; 3],
    pub random_field_amplitude: f64,
    pub random_field_smoothness: f64,
    pub box_padding: f64,
    pub include_strain: bool,
}

impl CrystalSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "CrystalSpec", msg });
        if self.n_planes != self.planes.len() {
            return bad(format!("n_planes {} but {} planes", self.n_planes, self.planes.len()));
        }
        for p in &self.planes {
            ClipPlane::new(p.normal, p.distance)?;
        }
        let e = &self.affine_strain;
        for i in 0..3 {
            for j in 0..3 {
                if e[i][j] != e[j][i] {
                    return bad("affine strain must be symmetric".into());
                }
                let engineering = if i == j { e[i][j] } else { 2.0 * e[i][j] };
                if engineering.abs() > 0.01 + 1e-12 {
                    return bad(format!("strain component ({i},{j}) = {engineering} exceeds 0.01"));
                }
            }
        }
        Ok(())
    }

    /// Same geometry with the displacement field removed.
    pub fn without_strain(&self) -> Self {
        Self {
            include_strain: false,
            ..self.clone()
        }
    }
}

/// Shape, phase and diffraction magnitude of one crystal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub shape: RealVolume,
    pub phase: RealVolume,
    pub magnitude: RealVolume,
}

/// Lattice displacement in normalized lattice units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub u: [RealVolume; 3],
}

/// SplitMix64 finalizer, used to derive per-sample seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Direction uniform on the unit sphere, from three standard normals.
pub fn sample_unit_normal<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-12 {
            return v.map(|c| c / norm);
        }
    }
}

/// Center and half-extent of the uncut block, in lattice units.
pub fn crystal_region(grid: &GridSpec, box_padding: f64) -> ([f64; 3], f64) {
    let extent = grid.extent();
    let center = extent.map(|e| e / 2.0);
    let min_extent = extent.iter().copied().fold(f64::INFINITY, f64::min);
    let half = (min_extent / 4.0).min(min_extent / 2.0 - box_padding);
    (center, half)
}

/// Draws a crystal recipe, re-drawing until the shape passes the size and
/// oversampling guards.
pub fn generate_spec(seed: u64, cfg: &CrystalConfig) -> Result<CrystalSpec> {
    if cfg.min_planes < 1 || cfg.min_planes > cfg.max_planes {
        return Err(Error::InvalidArgument {
            op: "generate_spec",
            msg: format!("bad plane range [{}, {}]", cfg.min_planes, cfg.max_planes),
        });
    }
    let (_, half) = crystal_region(&cfg.grid, cfg.box_padding);
    if !(half > 0.0) {
        return Err(Error::InvalidArgument {
            op: "generate_spec",
            msg: "box padding leaves no room for a crystal".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let spec = draw_spec(seed, cfg, half, &mut rng);
        match voxelize_raw(&spec, &cfg.grid) {
            Ok((_, fraction)) if fraction >= cfg.min_occupancy_fraction => return Ok(spec),
            Ok(_) | Err(Error::ExceedsOversamplingBound { .. }) | Err(Error::TooSmall { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Err(Error::RejectionExhausted {
        seed,
        attempts: cfg.max_attempts,
    })
}

fn draw_spec(seed: u64, cfg: &CrystalConfig, half: f64, rng: &mut ChaCha8Rng) -> CrystalSpec {
    let n_planes = rng.random_range(cfg.min_planes..=cfg.max_planes);
    let [lo, hi] = cfg.distance_range;
    let planes = (0..n_planes)
        .map(|_| ClipPlane {
            normal: sample_unit_normal(rng),
            distance: rng.random_range(lo * half..=hi * half),
        })
        .collect();
    // engineering components: exx, eyy, ezz, gyz, gxz, gxy
    let mut c = [0.0f64; 6];
    for v in &mut c {
        *v = rng.random_range(-cfg.max_strain..=cfg.max_strain);
    }
    let affine_strain = [
        [c[0], c[5] / 2.0, c[4] / 2.0],
        [c[5] / 2.0, c[1], c[3] / 2.0],
        [c[4] / 2.0, c[3] / 2.0, c[2]],
    ];
    CrystalSpec {
        seed,
        n_planes,
        planes,
        affine_strain,
        random_field_amplitude: cfg.random_field_amplitude,
        random_field_smoothness: cfg.random_field_smoothness,
        box_padding: cfg.box_padding,
        include_strain: cfg.include_strain,
    }
}

/// Fractional occupancy of the clipped block, max-normalized.
pub fn voxelize_occupancy(spec: &CrystalSpec, grid: &GridSpec) -> Result<RealVolume> {
    let (mut occ, _) = voxelize_raw(spec, grid)?;
    let max = occ.max();
    if max <= 0.0 {
        return Err(Error::TooSmall { fraction: 0.0 });
    }
    occ.data_mut().iter_mut().for_each(|v| *v /= max);
    Ok(occ)
}

/// Unnormalized occupancy and the occupied fraction of the block volume.
pub(crate) fn voxelize_raw(spec: &CrystalSpec, grid: &GridSpec) -> Result<(RealVolume, f64)> {
    let dims = grid.dims;
    dims.require_even("voxelize_occupancy")?;
    let (center, half) = crystal_region(grid, spec.box_padding);
    let pitch = grid.voxel_pitch;
    let n = dims.as_array();
    // voxel index range that can intersect the block
    let range = |a: usize| {
        let lo = ((center[a] - half) / pitch).floor().max(0.0) as usize;
        let hi = (((center[a] + half) / pitch).ceil() as usize).min(n[a]);
        lo..hi
    };
    let offsets: Vec<f64> = (0..SUBSAMPLES)
        .map(|s| (s as f64 + 0.5) / SUBSAMPLES as f64)
        .collect();
    let per_voxel = (SUBSAMPLES * SUBSAMPLES * SUBSAMPLES) as f64;
    let mut occ = RealVolume::zeros(dims);
    let mut total = 0.0;
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let mut hits = 0usize;
                for &ox in &offsets {
                    let px = (x as f64 + ox) * pitch - center[0];
                    for &oy in &offsets {
                        let py = (y as f64 + oy) * pitch - center[1];
                        for &oz in &offsets {
                            let pz = (z as f64 + oz) * pitch - center[2];
                            let rel = [px, py, pz];
                            if rel.iter().all(|c| c.abs() <= half)
                                && spec.planes.iter().all(|p| p.contains(rel))
                            {
                                hits += 1;
                            }
                        }
                    }
                }
                if hits > 0 {
                    let frac = hits as f64 / per_voxel;
                    *occ.at_mut(x, y, z) = frac as f32;
                    total += frac;
                }
            }
        }
    }
    check_central_half(&occ)?;
    let block_voxels = (2.0 * half / pitch).powi(3);
    let fraction = total / block_voxels;
    if total == 0.0 {
        return Err(Error::TooSmall { fraction });
    }
    Ok((occ, fraction))
}

/// Nonzero occupancy must stay inside `[n/4, 3n/4)` on every axis.
fn check_central_half(occ: &RealVolume) -> Result<()> {
    let dims = occ.dims();
    let n = dims.as_array();
    for (i, &v) in occ.data().iter().enumerate() {
        if v > 0.0 {
            let c = dims.coords(i);
            for a in 0..3 {
                if c[a] < n[a] / 4 || c[a] >= 3 * n[a] / 4 {
                    return Err(Error::ExceedsOversamplingBound { axis: a });
                }
            }
        }
    }
    Ok(())
}

/// Occupancy-weighted centroid of voxel centers, in lattice units.
pub fn occupancy_centroid(occ: &RealVolume, pitch: f64) -> [f64; 3] {
    let dims = occ.dims();
    let mut acc = [0.0; 3];
    let mut w = 0.0;
    for (i, &v) in occ.data().iter().enumerate() {
        if v > 0.0 {
            let c = dims.coords(i);
            for a in 0..3 {
                acc[a] += v as f64 * (c[a] as f64 + 0.5) * pitch;
            }
            w += v as f64;
        }
    }
    if w > 0.0 {
        acc.map(|s| s / w)
    } else {
        acc
    }
}

/// `u(r) = strain . (r - r_c) + A s(r)` on the support, zero elsewhere.
pub fn synth_displacement<R: Rng + ?Sized>(
    spec: &CrystalSpec,
    occupancy: &RealVolume,
    grid: &GridSpec,
    rng: &mut R,
) -> DisplacementField {
    let dims = occupancy.dims();
    if !spec.include_strain {
        return DisplacementField {
            u: [0, 1, 2].map(|_| RealVolume::zeros(dims)),
        };
    }
    let pitch = grid.voxel_pitch;
    let centroid = occupancy_centroid(occupancy, pitch);
    let smooth = random_field(dims, spec.random_field_smoothness, rng);
    let eps = &spec.affine_strain;
    let u = [0usize, 1, 2].map(|a| {
        let mut out = RealVolume::zeros(dims);
        for (i, (o, &occ)) in out.data_mut().iter_mut().zip(occupancy.data()).enumerate() {
            if occ == 0.0 {
                continue;
            }
            let c = dims.coords(i);
            let rel = [0, 1, 2].map(|b| (c[b] as f64 + 0.5) * pitch - centroid[b]);
            let affine: f64 = (0..3).map(|b| eps[a][b] * rel[b]).sum();
            *o = (affine + spec.random_field_amplitude * smooth[a][i]) as f32;
        }
        out
    });
    DisplacementField { u }
}

/// Per-component white noise, Gaussian-smoothed and max-normalized.
fn random_field<R: Rng + ?Sized>(dims: Dims, sigma: f64, rng: &mut R) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|_| {
        let noise: Vec<f64> = (0..dims.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut s = gaussian_blur_f64(&noise, dims, sigma);
        let max = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            s.iter_mut().for_each(|v| *v /= max);
        }
        s
    })
}

/// `phase = wrap(g . u)` into `[-pi, pi)`.
pub fn phase_from_displacement(u: &DisplacementField, g: &BraggVector) -> RealVolume {
    let [ux, uy, uz] = &u.u;
    let data = ux
        .data()
        .iter()
        .zip(uy.data())
        .zip(uz.data())
        .map(|((&x, &y), &z)| {
            let p = g.g[0] * x as f64 + g.g[1] * y as f64 + g.g[2] * z as f64;
            wrap_phase(p) as f32
        })
        .collect();
    RealVolume::new(ux.dims(), data).expect("component dims agree")
}

/// Builds shape, phase and magnitude with the default Bragg vector and
/// forward configuration.
pub fn make_sample(spec: &CrystalSpec, grid: &GridSpec) -> Result<TrainingSample> {
    make_sample_with(spec, grid, &BraggVector::default(), &ForwardConfig::default())
}

pub fn make_sample_with(
    spec: &CrystalSpec,
    grid: &GridSpec,
    bragg: &BraggVector,
    fwd: &ForwardConfig,
) -> Result<TrainingSample> {
    spec.validate()?;
    let shape = voxelize_occupancy(spec, grid)?;
    let mut rng = displacement_rng(spec.seed);
    let u = synth_displacement(spec, &shape, grid, &mut rng);
    sample_from_displacement(shape, &u, bragg, fwd)
}

/// Assembles a sample from an externally computed displacement field.
pub fn sample_from_displacement(
    shape: RealVolume,
    u: &DisplacementField,
    bragg: &BraggVector,
    fwd: &ForwardConfig,
) -> Result<TrainingSample> {
    for c in &u.u {
        shape.require_same_dims(c)?;
    }
    let phase = phase_from_displacement(u, bragg);
    let magnitude = simulate_diffraction(&shape, &phase, fwd)?;
    Ok(TrainingSample {
        shape,
        phase,
        magnitude,
    })
}

/// Random stream for the displacement noise, independent of the geometry draw.
fn displacement_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}
