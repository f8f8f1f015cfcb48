use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{load_image, Image, SeededRng};
use crate::error::{Error, Result};

/// Disjoint training and evaluation pools.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PathBuf>,
    pub eval: Vec<PathBuf>,
}

/// Shuffles `paths` and sets aside `eval_count` of them for evaluation.
pub fn make_splits(paths: &[PathBuf], eval_count: usize, rng: &mut SeededRng) -> Result<DatasetSplit> {
    if eval_count >= paths.len() {
        return Err(Error::config(format!(
            "eval_count {eval_count} must be smaller than the number of images ({})",
            paths.len()
        )));
    }
    let mut shuffled = paths.to_vec();
    shuffled.shuffle(rng);
    let train = shuffled.split_off(eval_count);
    Ok(DatasetSplit { train, eval: shuffled })
}

/// Lists `*.png`, `*.jpg` and `*.jpeg` files directly under `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::config(format!("dataset directory {} does not exist", dir.display())));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_all(paths: &[PathBuf], side: usize) -> Result<Vec<Image>> {
    paths.iter().map(|p| load_image(p, side)).collect()
}

/// Draws (cover, secret) index pairs from a pool without replacement within
/// each pass; the pool is reshuffled when it runs dry.
#[derive(Debug, Clone)]
pub struct PairSampler {
    len: usize,
    queue: Vec<usize>,
    rng: SeededRng,
}

impl PairSampler {
    pub fn new(len: usize, rng: SeededRng) -> Result<Self> {
        if len < 2 {
            return Err(Error::config("pairing needs at least two training images"));
        }
        Ok(Self { len, queue: Vec::new(), rng })
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        if self.queue.len() < 2 {
            self.queue = (0..self.len).collect();
            self.queue.shuffle(&mut self.rng);
        }
        let cover = self.queue.pop().expect("refilled");
        let secret = self.queue.pop().expect("refilled");
        (cover, secret)
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|_| self.next_pair()).collect()
    }
}
