//! On-disk datasets of paired strained / zero-strain crystals, and
//! preprocessing of measured volumes to network dims.
//!
//! A dataset directory holds `manifest.json` and one CDIV file per volume
//! under `volumes/`. Every geometry seed is used for at most one strained and
//! one zero-strain sample, and both land in the same split.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystalgen::{generate_spec, make_sample_with, mix_seed, BraggVector, CrystalConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::forward::ForwardConfig;
use crate::volume::{cdiv, dct_resample, Dims, RealVolume};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const VOLUME_DIR: &str = "volumes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    /// Paths relative to the dataset root.
    pub shape: String,
    pub phase: String,
    pub magnitude: String,
    /// Geometry seed, shared by a strained sample and its zero-strain twin.
    pub seed: u64,
    pub include_strain: bool,
    pub n_planes: usize,
    pub strain: [[f64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_seed: u64,
    pub grid_dims: [usize; 3],
    pub voxel_pitch: f64,
    /// `"max"` when magnitudes are divided by their maximum, else `"none"`.
    pub normalization: String,
    pub bragg_vector: [f64; 3],
    pub counts: SplitCounts,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn load(root: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(root.join(MANIFEST_FILE))?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::write(root.join(MANIFEST_FILE), self.to_json()?)?;
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |r| r.split == split)
    }

    /// Checks unique ids, disjoint geometry between splits, consistent
    /// counts, and that every referenced volume parses with the grid dims.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.samples {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate sample id {}", r.id)));
            }
        }
        let train_seeds: HashSet<u64> = self.records(Split::Train).map(|r| r.seed).collect();
        if let Some(r) = self.records(Split::Test).find(|r| train_seeds.contains(&r.seed)) {
            return Err(Error::Format(format!("geometry seed {} of {} appears in both splits", r.seed, r.id)));
        }
        let counts = SplitCounts { train: self.records(Split::Train).count(), test: self.records(Split::Test).count() };
        if counts != self.counts {
            return Err(Error::Format(format!("counts {:?} do not match records {counts:?}", self.counts)));
        }
        let dims = Dims::from_array(self.grid_dims);
        self.samples.par_iter().try_for_each(|r| {
            for rel in [&r.shape, &r.phase, &r.magnitude] {
                let v = cdiv::read_real(root.join(rel))
                    .map_err(|e| Error::Format(format!("{}: {rel}: {e}", r.id)))?;
                if v.dims() != dims {
                    return Err(Error::DimMismatch { left: v.dims(), right: dims });
                }
            }
            Ok(())
        })
    }

    pub fn load_sample(&self, root: &Path, record: &SampleRecord) -> Result<TrainingSample> {
        Ok(TrainingSample {
            shape: cdiv::read_real(root.join(&record.shape))?,
            phase: cdiv::read_real(root.join(&record.phase))?,
            magnitude: cdiv::read_real(root.join(&record.magnitude))?,
        })
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<TrainingSample>> {
        let recs: Vec<&SampleRecord> = self.records(split).collect();
        recs.par_iter().map(|r| self.load_sample(root, r)).collect()
    }
}

/// Geometry seed of the `i`-th crystal of a dataset.
pub fn geometry_seed(dataset_seed: u64, i: u64) -> u64 {
    mix_seed(dataset_seed ^ i)
}

/// Test membership per geometry index: `round(n * test_fraction)` indices
/// chosen by a seeded shuffle.
pub fn plan_split(n_geometries: usize, test_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument {
            op: "plan_split",
            msg: format!("test fraction must be in [0, 1), got {test_fraction}"),
        });
    }
    let n_test = (n_geometries as f64 * test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n_geometries).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x5157_u64)));
    let mut is_test = vec![false; n_geometries];
    idx[..n_test].iter().for_each(|&i| is_test[i] = true);
    Ok(is_test)
}

/// Train/test counts of a dataset with `n_strained` strained crystals and
/// zero-strain twins of the first `n_unstrained` geometries.
pub fn planned_counts(n_strained: usize, n_unstrained: usize, is_test: &[bool]) -> SplitCounts {
    let test = is_test[..n_strained].iter().filter(|&&t| t).count()
        + is_test[..n_unstrained].iter().filter(|&&t| t).count();
    SplitCounts { train: n_strained + n_unstrained - test, test }
}

/// [`build_dataset_with`] using the default generator, Bragg vector and
/// forward model.
pub fn build_dataset(
    n_strained: usize,
    n_unstrained: usize,
    test_fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    build_dataset_with(
        &CrystalConfig::default(),
        &BraggVector::default(),
        &ForwardConfig::default(),
        n_strained,
        n_unstrained,
        test_fraction,
        seed,
        out_dir,
    )
}

/// Generates `n_strained` strained crystals and zero-strain twins of the
/// first `n_unstrained` geometries, writes their volumes and the manifest.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset_with(
    cfg: &CrystalConfig,
    bragg: &BraggVector,
    fwd: &ForwardConfig,
    n_strained: usize,
    n_unstrained: usize,
    test_fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_strained < 1 || n_unstrained < 1 {
        return Err(Error::InvalidArgument { op: "build_dataset", msg: "sample counts must be >= 1".into() });
    }
    let n_geom = n_strained.max(n_unstrained);
    let is_test = plan_split(n_geom, test_fraction, seed)?;
    fs::create_dir_all(out_dir.join(VOLUME_DIR))?;
    let per_geometry: Vec<Vec<SampleRecord>> = (0..n_geom)
        .into_par_iter()
        .map(|i| {
            let gseed = geometry_seed(seed, i as u64);
            let strained = generate_spec(gseed, &CrystalConfig { include_strain: true, ..cfg.clone() })?;
            let split = if is_test[i] { Split::Test } else { Split::Train };
            let mut out = Vec::with_capacity(2);
            let variants = [(i < n_strained, 's'), (i < n_unstrained, 'u')];
            for (wanted, tag) in variants {
                if !wanted {
                    continue;
                }
                let spec = if tag == 's' { strained.clone() } else { strained.without_strain() };
                let sample = make_sample_with(&spec, &cfg.grid, bragg, fwd)?;
                let id = format!("{tag}{i:07}");
                let rel = |kind: &str| format!("{VOLUME_DIR}/{id}_{kind}.cdiv");
                let rec = SampleRecord {
                    shape: rel("shape"),
                    phase: rel("phase"),
                    magnitude: rel("magnitude"),
                    id,
                    split,
                    seed: gseed,
                    include_strain: spec.include_strain,
                    n_planes: spec.n_planes,
                    strain: spec.affine_strain,
                };
                cdiv::save_real(out_dir.join(&rec.shape), &sample.shape)?;
                cdiv::save_real(out_dir.join(&rec.phase), &sample.phase)?;
                cdiv::save_real(out_dir.join(&rec.magnitude), &sample.magnitude)?;
                out.push(rec);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<SampleRecord> = per_geometry.into_iter().flatten().collect();
    // strained block first, then the zero-strain block, each by index
    samples.sort_by(|a, b| (!a.include_strain, &a.id).cmp(&(!b.include_strain, &b.id)));
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dataset_seed: seed,
        grid_dims: cfg.grid.dims.as_array(),
        voxel_pitch: cfg.grid.voxel_pitch,
        normalization: if fwd.normalize { "max" } else { "none" }.into(),
        bragg_vector: bragg.g,
        counts: planned_counts(n_strained, n_unstrained, &is_test),
        samples,
    };
    manifest.save(out_dir)?;
    log::info!(
        "dataset: {} train / {} test samples in {}",
        manifest.counts.train,
        manifest.counts.test,
        out_dir.display()
    );
    Ok(manifest)
}

/// Brings a measured magnitude volume to network dims: zero-pad odd axes,
/// crop the largest cube centred on the intensity centroid, DCT-resample,
/// clamp negatives, max-normalize.
pub fn ingest_experimental(volume: &RealVolume, target: Dims) -> Result<RealVolume> {
    let op = "ingest_experimental";
    if volume.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument { op, msg: "input must be finite and non-negative".into() });
    }
    if volume.max() <= 0.0 {
        return Err(Error::InvalidArgument { op, msg: "input is all zero".into() });
    }
    let src = volume.dims().as_array();
    let even = src.map(|n| n + n % 2);
    let side = *even.iter().min().unwrap();
    let mut weight = 0.0f64;
    let mut centroid = [0.0f64; 3];
    for (i, &v) in volume.data().iter().enumerate() {
        let c = volume.dims().coords(i);
        for a in 0..3 {
            centroid[a] += v as f64 * c[a] as f64;
        }
        weight += v as f64;
    }
    // lower corner of the crop, clamped inside the padded volume
    let lo: [usize; 3] = std::array::from_fn(|a| {
        let start = (centroid[a] / weight).round() as isize - (side / 2) as isize;
        start.clamp(0, (even[a] - side) as isize) as usize
    });
    let crop = RealVolume::from_fn(Dims::cube(side), |x, y, z| {
        let p = [x + lo[0], y + lo[1], z + lo[2]];
        if (0..3).all(|a| p[a] < src[a]) {
            *volume.at(p[0], p[1], p[2])
        } else {
            0.0
        }
    });
    let resampled = dct_resample(&crop, target)?;
    let clamped = resampled.map(|&v| v.max(0.0));
    let max = clamped.max();
    if max <= 0.0 {
        return Err(Error::InvalidArgument { op, msg: "resampled volume is all zero".into() });
    }
    Ok(clamped.map(|&v| v / max))
}
