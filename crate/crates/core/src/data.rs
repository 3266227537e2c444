//! Dataset registry: CIFAR binary ingestion and synthetic generators.
//!
//! Dataset identifiers:
//! - `cifar10`, `cifar100`: the standard binary releases under the data root
//!   (`cifar-10-batches-bin/`, `cifar-100-binary/`).
//! - `cifar10-subset:<n>`: `n` items drawn from the CIFAR-10 training pool.
//! - `synthetic-gauss:<classes>:<n>`: Gaussian class clusters around random
//!   prototype images, `n` training items.
//!
//! Every loader returns disjoint train / eval / test splits. The eval split is
//! carved out of the training pool.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ImageBatch;

/// Environment variable overriding the configured dataset root.
pub const DATA_DIR_ENV: &str = "RCNAS_DATA_DIR";
/// Default size of the reward-evaluation split.
pub const DEFAULT_EVAL_SIZE: usize = 256;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self { images: self.images.select(indices), labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Leading `n` items (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub num_classes: usize,
    pub resolution: usize,
    /// SHA-256 over the train and eval splits (pixels and labels).
    pub fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: LabeledImages,
    pub eval: LabeledImages,
    pub test: LabeledImages,
    pub meta: DatasetMeta,
}

/// Parsed dataset identifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    Cifar10Subset(usize),
    SyntheticGauss { classes: usize, n: usize },
}

impl DatasetId {
    pub fn parse(id: &str) -> Result<Self> {
        let unknown = || Error::UnknownDataset(id.to_string());
        let parts: Vec<&str> = id.split(':').collect();
        match parts.as_slice() {
            ["cifar10"] => Ok(Self::Cifar10),
            ["cifar100"] => Ok(Self::Cifar100),
            ["cifar10-subset", n] => n.parse().ok().filter(|&n| n > 0).map(Self::Cifar10Subset).ok_or_else(unknown),
            ["synthetic-gauss", c, n] => {
                let classes: usize = c.parse().map_err(|_| unknown())?;
                let n: usize = n.parse().map_err(|_| unknown())?;
                if classes < 2 || n == 0 {
                    return Err(unknown());
                }
                Ok(Self::SyntheticGauss { classes, n })
            }
            _ => Err(unknown()),
        }
    }
}

/// Knobs that are not part of the dataset identifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub eval_size: usize,
    pub seed: u64,
    /// Dataset root; `RCNAS_DATA_DIR` takes precedence when set.
    pub data_dir: Option<PathBuf>,
    /// Side length of synthetic images.
    pub synthetic_resolution: usize,
    /// Per-pixel offset of class prototypes from mid-grey.
    pub synthetic_amplitude: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub synthetic_noise: f32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            eval_size: DEFAULT_EVAL_SIZE,
            seed: 0,
            data_dir: None,
            synthetic_resolution: 32,
            synthetic_amplitude: 0.1,
            synthetic_noise: 0.2,
        }
    }
}

impl LoadOptions {
    pub fn data_root(&self) -> PathBuf {
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
    }
}

pub fn load_dataset(id: &str, opts: &LoadOptions) -> Result<DatasetSplits> {
    let parsed = DatasetId::parse(id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let (pool, test, classes, resolution) = match parsed {
        DatasetId::Cifar10 => {
            let (train, test) = read_cifar(&opts.data_root(), false)?;
            (train, test, 10, CIFAR_SIDE)
        }
        DatasetId::Cifar100 => {
            let (train, test) = read_cifar(&opts.data_root(), true)?;
            (train, test, 100, CIFAR_SIDE)
        }
        DatasetId::Cifar10Subset(n) => {
            let (train, test) = read_cifar(&opts.data_root(), false)?;
            if n > train.len() {
                return Err(Error::Config(format!("subset of {n} exceeds the {} training items", train.len())));
            }
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
            (train.select(&idx), test, 10, CIFAR_SIDE)
        }
        DatasetId::SyntheticGauss { classes, n } => {
            let test_n = (n / 4).max(classes);
            let all = synthetic_gauss(classes, n + opts.eval_size + test_n, opts, &mut rng);
            let pool: Vec<usize> = (0..n + opts.eval_size).collect();
            let test: Vec<usize> = (n + opts.eval_size..all.len()).collect();
            (all.select(&pool), all.select(&test), classes, opts.synthetic_resolution)
        }
    };
    if opts.eval_size >= pool.len() {
        return Err(Error::Config(format!(
            "eval size {} leaves no training data out of {}",
            opts.eval_size,
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    let (eval_idx, train_idx) = idx.split_at(opts.eval_size);
    let mut eval_idx = eval_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    let train = pool.select(&train_idx);
    let eval = pool.select(&eval_idx);
    let fingerprint = fingerprint(&[&train, &eval]);
    Ok(DatasetSplits { train, eval, test, meta: DatasetMeta { id: id.to_string(), num_classes: classes, resolution, fingerprint } })
}

fn fingerprint(sets: &[&LabeledImages]) -> String {
    let mut h = Sha256::new();
    for s in sets {
        h.update((s.len() as u64).to_le_bytes());
        let bytes: Vec<u8> = s.images.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        h.update(&bytes);
        for &l in &s.labels {
            h.update((l as u32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn synthetic_gauss(classes: usize, total: usize, opts: &LoadOptions, rng: &mut ChaCha8Rng) -> LabeledImages {
    let r = opts.synthetic_resolution;
    let d = r * r * 3;
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..d).map(|_| 0.5 + if rng.gen::<bool>() { opts.synthetic_amplitude } else { -opts.synthetic_amplitude }).collect())
        .collect();
    let noise = Normal::new(0.0f32, opts.synthetic_noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % classes;
        labels.push(c);
        for &m in &prototypes[c] {
            data.push((m + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    LabeledImages { images: ImageBatch { n: total, h: r, w: r, c: 3, data }, labels }
}

fn read_cifar(root: &Path, hundred: bool) -> Result<(LabeledImages, LabeledImages)> {
    let (dir, train_files, test_file, label_bytes) = if hundred {
        (root.join("cifar-100-binary"), vec!["train.bin".to_string()], "test.bin", 2)
    } else {
        (
            root.join("cifar-10-batches-bin"),
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
            1,
        )
    };
    let format = if hundred {
        "CIFAR-100 binary (3074-byte records: coarse label, fine label, 3072 pixel bytes)"
    } else {
        "CIFAR-10 binary (3073-byte records: label, 3072 pixel bytes)"
    };
    let mut train = Vec::new();
    for f in &train_files {
        train.push(read_cifar_file(&dir.join(f), label_bytes, format)?);
    }
    let test = read_cifar_file(&dir.join(test_file), label_bytes, format)?;
    let train = concat(train);
    Ok((train, test))
}

fn concat(parts: Vec<LabeledImages>) -> LabeledImages {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        data.extend(p.images.data);
        labels.extend(p.labels);
    }
    let n = labels.len();
    LabeledImages { images: ImageBatch { n, h: CIFAR_SIDE, w: CIFAR_SIDE, c: 3, data }, labels }
}

/// Parses one CIFAR binary file. The last label byte is the class (the fine
/// label for CIFAR-100); pixels are stored as R, G, B planes of 32×32 and
/// converted to NHWC in `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize) -> Result<LabeledImages> {
    let rec = label_bytes + CIFAR_PIXELS;
    if bytes.len() % rec != 0 {
        return Err(Error::Shape(format!("{} bytes is not a whole number of {rec}-byte records", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut data = vec![0.0f32; n * CIFAR_PIXELS];
    let mut labels = Vec::with_capacity(n);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        labels.push(r[label_bytes - 1] as usize);
        let px = &r[label_bytes..];
        let out = &mut data[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for p in 0..plane {
            for ch in 0..3 {
                out[p * 3 + ch] = px[ch * plane + p] as f32 / 255.0;
            }
        }
    }
    Ok(LabeledImages { images: ImageBatch { n, h: CIFAR_SIDE, w: CIFAR_SIDE, c: 3, data }, labels })
}

fn read_cifar_file(path: &Path, label_bytes: usize, format: &str) -> Result<LabeledImages> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingData { path: path.to_path_buf(), format: format.to_string() })?;
    parse_cifar_records(&bytes, label_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(eval: usize) -> LoadOptions {
        LoadOptions { eval_size: eval, synthetic_resolution: 8, ..Default::default() }
    }

    #[test]
    fn ids_parse() {
        assert_eq!(DatasetId::parse("cifar10").unwrap(), DatasetId::Cifar10);
        assert_eq!(DatasetId::parse("cifar10-subset:5000").unwrap(), DatasetId::Cifar10Subset(5000));
        assert_eq!(
            DatasetId::parse("synthetic-gauss:2:1000").unwrap(),
            DatasetId::SyntheticGauss { classes: 2, n: 1000 }
        );
        for bad in ["imagenet", "synthetic-gauss:1:10", "synthetic-gauss:2", "cifar10-subset:x", "cifar10-subset:0"] {
            assert!(DatasetId::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn synthetic_sizes_and_disjointness() {
        let s = load_dataset("synthetic-gauss:2:1000", &opts(256)).unwrap();
        assert_eq!(s.train.len(), 1000);
        assert_eq!(s.eval.len(), 256);
        assert_eq!(s.meta.num_classes, 2);
        assert!(s.train.images.data.iter().all(|v| (0.0..=1.0).contains(v)));
        // items are drawn with continuous noise, so equal pixel vectors would mean shared items
        let train: std::collections::HashSet<Vec<u32>> =
            (0..s.train.len()).map(|i| s.train.images.item(i).iter().map(|v| v.to_bits()).collect()).collect();
        for i in 0..s.eval.len() {
            let key: Vec<u32> = s.eval.images.item(i).iter().map(|v| v.to_bits()).collect();
            assert!(!train.contains(&key));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = load_dataset("synthetic-gauss:3:200", &opts(32)).unwrap();
        let b = load_dataset("synthetic-gauss:3:200", &opts(32)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let c = load_dataset("synthetic-gauss:3:200", &LoadOptions { seed: 1, ..opts(32) }).unwrap();
        assert_ne!(a.eval, c.eval);
        assert_eq!(a.meta.fingerprint, b.meta.fingerprint);
        assert_ne!(a.meta.fingerprint, c.meta.fingerprint);
    }

    #[test]
    fn missing_cifar_names_path_and_format() {
        let o = LoadOptions { data_dir: Some(PathBuf::from("/nonexistent/rcnas")), ..opts(256) };
        if std::env::var(DATA_DIR_ENV).is_ok() {
            return;
        }
        let err = load_dataset("cifar10", &o).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/rcnas/cifar-10-batches-bin/data_batch_1.bin"), "{err}");
        assert!(err.contains("3073-byte"), "{err}");
    }

    #[test]
    fn cifar_record_layout() {
        let mut rec = vec![7u8];
        rec.extend((0..CIFAR_PIXELS).map(|i| (i / 1024) as u8 * 100));
        let one = parse_cifar_records(&rec, 1).unwrap();
        assert_eq!(one.labels, vec![7]);
        // first pixel: R plane 0, G plane 100, B plane 200
        assert_eq!(&one.images.data[..3], &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
        let mut rec100 = vec![3u8, 42u8];
        rec100.extend(std::iter::repeat(0).take(CIFAR_PIXELS));
        assert_eq!(parse_cifar_records(&rec100, 2).unwrap().labels, vec![42]);
        assert!(parse_cifar_records(&rec[..100], 1).is_err());
    }

    #[test]
    fn cifar_split_sizes_from_binary_files() {
        let dir = tempfile::tempdir().unwrap();
        let batches = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir_all(&batches).unwrap();
        let write = |name: &str, n: usize| {
            let mut bytes = Vec::new();
            for i in 0..n {
                bytes.push((i % 10) as u8);
                bytes.extend((0..CIFAR_PIXELS).map(|p| ((p + i) % 256) as u8));
            }
            std::fs::write(batches.join(name), bytes).unwrap();
        };
        for i in 1..=5 {
            write(&format!("data_batch_{i}.bin"), 20);
        }
        write("test_batch.bin", 10);
        let o = LoadOptions { data_dir: Some(dir.path().to_path_buf()), eval_size: 16, ..Default::default() };
        if std::env::var(DATA_DIR_ENV).is_ok() {
            return;
        }
        let s = load_dataset("cifar10", &o).unwrap();
        assert_eq!((s.train.len(), s.eval.len(), s.test.len()), (84, 16, 10));
        let sub = load_dataset("cifar10-subset:40", &o).unwrap();
        assert_eq!((sub.train.len(), sub.eval.len()), (24, 16));
    }
}
