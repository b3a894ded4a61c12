//! Modular addition: labels, seeded train/test splits, dataset files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub p: u32,
    pub train_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
}

impl TaskSpec {
    pub fn grid_size(&self) -> u64 {
        u64::from(self.p) * u64::from(self.p)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p < 3 || !is_prime(self.p) {
            out.push(format!("task.p = {} must be a prime >= 3", self.p));
        }
        if self.train_size == 0 {
            out.push("task.train_size must be > 0".into());
        }
        let total = self.train_size as u64 + self.test_size as u64;
        if total > self.grid_size() {
            out.push(format!(
                "task.train_size + task.test_size = {total} exceeds p^2 = {}",
                self.grid_size()
            ));
        }
        if self.test_size == 0 && (self.train_size as u64) < self.grid_size() {
            out.push("task.test_size may only be 0 when the training set covers every pair".into());
        }
        out
    }
}

pub fn is_prime(n: u32) -> bool {
    if n < 2 {
        return false;
    }
    let n = u64::from(n);
    let mut d = 2u64;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExamplePair {
    pub a: u32,
    pub b: u32,
    pub c: u32,
}

impl ExamplePair {
    pub fn new(a: u32, b: u32, p: u32) -> Result<Self> {
        Ok(ExamplePair {
            a,
            b,
            c: label(a, b, p)?,
        })
    }

    pub fn from_index(index: u64, p: u32) -> Self {
        let p64 = u64::from(p);
        let a = (index / p64) as u32;
        let b = (index % p64) as u32;
        ExamplePair {
            a,
            b,
            c: ((u64::from(a) + u64::from(b)) % p64) as u32,
        }
    }

    pub fn index(&self, p: u32) -> u64 {
        u64::from(self.a) * u64::from(p) + u64::from(self.b)
    }
}

/// `(a + b) mod p`.
pub fn label(a: u32, b: u32, p: u32) -> Result<u32> {
    if p == 0 || a >= p || b >= p {
        return Err(Error::Input(format!(
            "operands ({a}, {b}) out of range for modulus {p}"
        )));
    }
    Ok(((u64::from(a) + u64::from(b)) % u64::from(p)) as u32)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
}

/// Draws `train_size + test_size` distinct cells of the p x p grid by a
/// seeded partial Fisher-Yates over the virtual index array `a*p + b`.
/// The first `train_size` draws form the training set; the rest come from
/// the remaining cells and form the test set.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    let total = spec.train_size as u64 + spec.test_size as u64;
    let grid = spec.grid_size();
    if total > grid {
        return Err(Error::Capacity {
            requested: total,
            available: grid,
        });
    }
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut rng = rng::stream(spec.data_seed, rng::DATA, &[]);
    let mut displaced: std::collections::HashMap<u64, u64> = std::collections::HashMap::with_capacity(total as usize);
    let mut picked = Vec::with_capacity(total as usize);
    for i in 0..total {
        let j = i + rng::below(&mut rng, grid - i);
        let at_i = *displaced.get(&i).unwrap_or(&i);
        let at_j = *displaced.get(&j).unwrap_or(&j);
        displaced.insert(j, at_i);
        picked.push(at_j);
    }
    let test = picked
        .split_off(spec.train_size)
        .into_iter()
        .map(|ix| ExamplePair::from_index(ix, spec.p))
        .collect();
    let train = picked
        .into_iter()
        .map(|ix| ExamplePair::from_index(ix, spec.p))
        .collect();
    Ok(Dataset {
        spec: *spec,
        train,
        test,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"ORDLDATA";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Header (magic, version, p, sizes, seed), then one `(u64 index, u32
    /// label)` record per pair (train first), then a SHA-256 trailer.
    /// All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(48 + 12 * (self.train.len() + self.test.len()) + 32);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.spec.p.to_le_bytes());
        buf.extend_from_slice(&(self.spec.train_size as u64).to_le_bytes());
        buf.extend_from_slice(&(self.spec.test_size as u64).to_le_bytes());
        buf.extend_from_slice(&self.spec.data_seed.to_le_bytes());
        for pair in self.train.iter().chain(&self.test) {
            buf.extend_from_slice(&pair.index(self.spec.p).to_le_bytes());
            buf.extend_from_slice(&pair.c.to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        if bytes.len() < 48 + 32 {
            return Err(bad("dataset file truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("dataset checksum mismatch"));
        }
        if &body[..8] != DATASET_MAGIC {
            return Err(bad("not a dataset file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
        if u32_at(8) != DATASET_VERSION {
            return Err(bad("unsupported dataset version"));
        }
        let spec = TaskSpec {
            p: u32_at(12),
            train_size: u64_at(16) as usize,
            test_size: u64_at(24) as usize,
            data_seed: u64_at(32),
        };
        let n = spec.train_size + spec.test_size;
        if body.len() != 40 + 12 * n {
            return Err(bad("dataset record count does not match header"));
        }
        let mut pairs = Vec::with_capacity(n);
        for r in 0..n {
            let o = 40 + 12 * r;
            let index = u64_at(o);
            if index >= spec.grid_size() {
                return Err(bad("pair index outside the p x p grid"));
            }
            let pair = ExamplePair::from_index(index, spec.p);
            if pair.c != u32_at(o + 8) {
                return Err(Error::format(
                    path,
                    format!("label mismatch for ({}, {}): stored {}", pair.a, pair.b, u32_at(o + 8)),
                ));
            }
            pairs.push(pair);
        }
        let test = pairs.split_off(spec.train_size);
        Ok(Dataset {
            spec,
            train: pairs,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn label_examples() {
        assert_eq!(label(3, 4, 5).unwrap(), 2);
        assert_eq!(label(0, 0, 9973).unwrap(), 0);
        assert_eq!(label(9972, 1, 9973).unwrap(), 0);
        assert!(matches!(label(5, 0, 5), Err(Error::Input(_))));
        assert!(matches!(label(0, 7, 5), Err(Error::Input(_))));
    }

    #[test]
    fn exhaustive_grid_with_empty_test() {
        let spec = TaskSpec {
            p: 5,
            train_size: 25,
            test_size: 0,
            data_seed: 1,
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 25);
        assert!(ds.test.is_empty());
        let cells: HashSet<_> = ds.train.iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(cells.len(), 25);
    }

    #[test]
    fn p97_desk_split() {
        let spec = TaskSpec {
            p: 97,
            train_size: 2500,
            test_size: 9409 - 2500,
            data_seed: 3,
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 2500);
        let train: HashSet<_> = ds.train.iter().copied().collect();
        let test: HashSet<_> = ds.test.iter().copied().collect();
        assert_eq!(train.len(), 2500);
        assert_eq!(test.len(), 6909);
        assert!(train.is_disjoint(&test));
        for e in ds.train.iter().chain(&ds.test) {
            assert_eq!(e.c, (e.a + e.b) % 97);
        }
    }

    #[test]
    fn capacity_error() {
        let spec = TaskSpec {
            p: 5,
            train_size: 20,
            test_size: 6,
            data_seed: 0,
        };
        assert!(matches!(
            generate_dataset(&spec),
            Err(Error::Capacity {
                requested: 26,
                available: 25
            })
        ));
    }

    #[test]
    fn invalid_modulus_rejected() {
        let spec = TaskSpec {
            p: 9,
            train_size: 5,
            test_size: 5,
            data_seed: 0,
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn seed_determines_dataset() {
        let spec = TaskSpec {
            p: 31,
            train_size: 300,
            test_size: 200,
            data_seed: 11,
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(&TaskSpec { data_seed: 12, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn operand_marginal_is_uniform_within_4_sigma() {
        let p = 31u32;
        let spec = TaskSpec {
            p,
            train_size: 600,
            test_size: 300,
            data_seed: 5,
        };
        let ds = generate_dataset(&spec).unwrap();
        let n = ds.train.len() as f64;
        let q = 1.0 / f64::from(p);
        let sigma = (n * q * (1.0 - q)).sqrt();
        for side in 0..2 {
            let mut counts = vec![0usize; p as usize];
            for e in &ds.train {
                counts[if side == 0 { e.a } else { e.b } as usize] += 1;
            }
            for &c in &counts {
                assert!((c as f64 - n * q).abs() < 4.0 * sigma, "count {c} vs {}", n * q);
            }
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.bin");
        let spec = TaskSpec {
            p: 13,
            train_size: 100,
            test_size: 50,
            data_seed: 2,
        };
        let ds = generate_dataset(&spec).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);

        let mut bytes = fs::read(&path).unwrap();
        bytes[60] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_label_rejected_even_with_valid_checksum() {
        let spec = TaskSpec {
            p: 13,
            train_size: 10,
            test_size: 5,
            data_seed: 2,
        };
        let ds = generate_dataset(&spec).unwrap();
        let mut bytes = ds.to_bytes();
        bytes.truncate(bytes.len() - 32);
        bytes[40 + 8] = (bytes[40 + 8] + 1) % 13;
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        let err = Dataset::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("label mismatch"), "{err}");
    }
}
