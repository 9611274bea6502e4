//! Synthetic hierarchical datasets, their on-disk format, and batching.
//!
//! A coarse class is a low-frequency oriented cosine over the whole image.
//! A fine class adds a high-frequency grating patch with a class-specific
//! orientation and location. Coarse orientations are packed into a narrow
//! fan, so the coarse level is easy to see but not trivial to separate;
//! siblings share neighbouring grating orientations.
//!
//! On disk a split is a directory holding `manifest.json` and `samples.csv`
//! (`coarse_index, fine_index, v_0 .. v_{D·H·W-1}`, row-major values).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::tree::LabelTree;

pub const COARSE_AMPLITUDE: f64 = 1.0;
/// Half the coarse amplitude: fine classes are the harder level.
pub const FINE_AMPLITUDE: f64 = 0.5;
/// Cycles of the coarse cosine across the image.
const COARSE_CYCLES: f64 = 2.0;
/// Period, in pixels, of the fine gratings.
const FINE_PERIOD: f64 = 2.5;
/// Angular range shared by the coarse orientations.
const COARSE_FAN: f64 = PI / 8.0;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const BATCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub coarse: usize,
    pub fine: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_coarse: usize,
    pub fines_per_coarse: usize,
    pub train_per_fine: usize,
    pub eval_per_fine: usize,
    /// Height and width of the single-channel images.
    pub extent: usize,
    /// Number of 2x2 poolings the consuming backbone applies.
    pub pool_depth: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_coarse: 4,
            fines_per_coarse: 3,
            train_per_fine: 50,
            eval_per_fine: 25,
            extent: 16,
            pool_depth: 2,
            noise_sigma: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_coarse == 0 || self.fines_per_coarse == 0 {
            return bad("class counts must be at least 1".into());
        }
        if self.train_per_fine == 0 || self.eval_per_fine == 0 {
            return bad("per-class sample counts must be at least 1".into());
        }
        let factor = 1usize.checked_shl(self.pool_depth as u32).unwrap_or(0);
        if self.extent == 0 || factor == 0 || !self.extent.is_multiple_of(factor) {
            return bad(format!(
                "extent {} is not divisible by 2^{}",
                self.extent, self.pool_depth
            ));
        }
        if self.extent < 4 {
            return bad(format!("extent {} is too small for a detail patch", self.extent));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn num_fine(&self) -> usize {
        self.n_coarse * self.fines_per_coarse
    }

    /// Coarse `k`, local index `j` → global fine index.
    pub fn fine_index(&self, coarse: usize, local: usize) -> usize {
        coarse * self.fines_per_coarse + local
    }

    pub fn tree(&self) -> LabelTree {
        let pairs: Vec<(String, String)> = (0..self.n_coarse)
            .flat_map(|k| (0..self.fines_per_coarse).map(move |j| (format!("coarse{k}"), format!("coarse{k}/fine{j}"))))
            .collect();
        LabelTree::build(&pairs).expect("generated pairs form a tree")
    }

    fn coarse_angle(&self, coarse: usize) -> f64 {
        COARSE_FAN * coarse as f64 / self.n_coarse as f64
    }

    /// Siblings take neighbouring orientation slots: slot = coarse·F + local.
    fn fine_angle(&self, coarse: usize, local: usize) -> f64 {
        let slot = self.fine_index(coarse, local);
        PI * (slot as f64 + 0.5) / self.num_fine() as f64
    }

    fn patch_size(&self) -> usize {
        self.extent / 2
    }

    fn patch_origin(&self, fine: usize) -> (usize, usize) {
        let p = self.patch_size();
        let span = self.extent - p;
        let grid = [0, span / 2, span];
        (grid[fine % 3], grid[(fine / 3) % 3])
    }

    /// Coarse template at the given phase.
    pub fn coarse_template(&self, coarse: usize, phase: f64) -> Tensor {
        let e = self.extent;
        let theta = self.coarse_angle(coarse);
        let (c, s) = (theta.cos(), theta.sin());
        let omega = 2.0 * PI * COARSE_CYCLES / e as f64;
        let data = (0..e * e)
            .map(|idx| {
                let (y, x) = ((idx / e) as f64, (idx % e) as f64);
                COARSE_AMPLITUDE * (omega * (x * c + y * s) + phase).cos()
            })
            .collect();
        Tensor::new(vec![1, e, e], data).expect("template shape")
    }

    /// Fine detail patch (zero outside the patch) at the given phase.
    pub fn fine_detail(&self, coarse: usize, local: usize, phase: f64) -> Tensor {
        let e = self.extent;
        let p = self.patch_size();
        let fine = self.fine_index(coarse, local);
        let (ox, oy) = self.patch_origin(fine);
        let theta = self.fine_angle(coarse, local);
        let (c, s) = (theta.cos(), theta.sin());
        let omega = 2.0 * PI / FINE_PERIOD;
        let mut t = Tensor::zeros(&[1, e, e]);
        let d = t.data_mut();
        for y in 0..p {
            for x in 0..p {
                let (yf, xf) = (y as f64, x as f64);
                d[(oy + y) * e + ox + x] = FINE_AMPLITUDE * (omega * (xf * c + yf * s) + phase).cos();
            }
        }
        t
    }

    fn draw(&self, coarse: usize, local: usize, rng: &mut Rng) -> Sample {
        let coarse_phase = rng.uniform(0.0, 2.0 * PI);
        let fine_phase = rng.uniform(0.0, 2.0 * PI);
        let mut x = self.coarse_template(coarse, coarse_phase);
        x.add_assign(&self.fine_detail(coarse, local, fine_phase)).expect("same shape");
        if self.noise_sigma > 0.0 {
            for v in x.data_mut() {
                *v += self.noise_sigma * rng.normal();
            }
        }
        Sample {
            x,
            coarse,
            fine: self.fine_index(coarse, local),
        }
    }

    fn split(&self, per_fine: usize, rng: &mut Rng) -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_fine * self.num_fine());
        for k in 0..self.n_coarse {
            for j in 0..self.fines_per_coarse {
                for _ in 0..per_fine {
                    out.push(self.draw(k, j, rng));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tree: LabelTree,
    /// (channels, height, width) of every sample.
    pub shape: [usize; 3],
    pub samples: Vec<Sample>,
    pub generator: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn new(tree: LabelTree, shape: [usize; 3], samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            tree,
            shape,
            samples,
            generator: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            s.x.expect_shape(&self.shape, "sample")?;
            let parent = self.tree.parent(s.fine).map_err(|_| {
                Error::InconsistentLabels(format!("sample {i}: fine index {} outside the tree", s.fine))
            })?;
            if parent != s.coarse {
                return Err(Error::InconsistentLabels(format!(
                    "sample {i}: fine {} has parent {parent}, labelled coarse {}",
                    s.fine, s.coarse
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
}

impl SyntheticData {
    pub fn tree(&self) -> &LabelTree {
        &self.train.tree
    }
}

/// Train and eval splits come from independent streams of `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let tree = spec.tree();
    let base = Rng::new(spec.seed);
    let shape = [1, spec.extent, spec.extent];
    let make = |per_fine, stream| Dataset {
        tree: tree.clone(),
        shape,
        samples: spec.split(per_fine, &mut base.split(stream)),
        generator: Some(spec.clone()),
    };
    Ok(SyntheticData {
        train: make(spec.train_per_fine, TRAIN_STREAM),
        eval: make(spec.eval_per_fine, EVAL_STREAM),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tree: LabelTree,
    shape: [usize; 3],
    count: usize,
    generator: Option<SyntheticSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        tree: dataset.tree.clone(),
        shape: dataset.shape,
        count: dataset.len(),
        generator: dataset.generator.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SAMPLES_FILE);
    let csv_err = |e: csv::Error| Error::MalformedDocument(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let numel: usize = dataset.shape.iter().product();
    let mut header = vec!["coarse_index".to_string(), "fine_index".to_string()];
    header.extend((0..numel).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let mut rec = vec![s.coarse.to_string(), s.fine.to_string()];
        rec.extend(s.x.data().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))?;
    if manifest.shape.contains(&0) {
        return Err(Error::MalformedDocument("zero extent in manifest shape".into()));
    }
    let numel: usize = manifest.shape.iter().product();

    let path = dir.join(SAMPLES_FILE);
    let bad = |msg: String| Error::MalformedDocument(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(&path).map_err(|e| bad(e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != numel + 2 {
            return Err(bad(format!("row {row} has {} fields, expected {}", rec.len(), numel + 2)));
        }
        let index = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| bad(format!("row {row}: bad label {:?}", &rec[i])))
        };
        let (coarse, fine) = (index(0)?, index(1)?);
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("row {row}: bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            x: Tensor::new(manifest.shape.to_vec(), values)?,
            coarse,
            fine,
        });
    }
    if samples.len() != manifest.count {
        return Err(bad(format!("{} rows, manifest says {}", samples.len(), manifest.count)));
    }
    let ds = Dataset {
        tree: manifest.tree,
        shape: manifest.shape,
        samples,
        generator: manifest.generator,
    };
    ds.validate()?;
    Ok(ds)
}

/// Deterministic per-epoch shuffle split into batches; the last batch may be short.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    Rng::new(seed ^ BATCH_SALT).split(epoch as u64).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
