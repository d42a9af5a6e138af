//! Image corpora and seed-determined batches.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Redraws allowed per batch slot before giving up on unreadable files.
const MAX_REDRAWS: usize = 64;

/// Image files under a directory, found recursively, in sorted order.
/// Decoded and resized images are cached after first use.
#[derive(Debug)]
pub struct Corpus {
    root: PathBuf,
    paths: Vec<PathBuf>,
    cache: Mutex<HashMap<(usize, usize), Option<Arc<Image>>>>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path);
        }
    }
    Ok(())
}

impl Corpus {
    pub fn discover(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::Config(format!("corpus directory {} does not exist", root.display())));
        }
        let mut paths = Vec::new();
        walk(&root, &mut paths)?;
        if paths.is_empty() {
            return Err(Error::EmptyCorpus(root));
        }
        paths.sort();
        Ok(Self {
            root,
            paths,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    /// Image `index` resized so its short edge is `short_edge`, or `None`
    /// when the file cannot be decoded or is smaller than `min_edge` after
    /// resizing.
    pub fn resized(&self, index: usize, short_edge: usize, min_edge: usize) -> Option<Arc<Image>> {
        let key = (index, short_edge);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return hit.clone();
        }
        let path = &self.paths[index];
        let loaded = match Image::load(path) {
            Ok(img) => {
                let img = img.resize_short_edge(short_edge);
                if img.height() < min_edge || img.width() < min_edge {
                    log::warn!("skipping {}: smaller than the {min_edge}px crop", path.display());
                    None
                } else {
                    Some(Arc::new(img))
                }
            }
            Err(e) => {
                log::warn!("skipping unreadable image: {e}");
                None
            }
        };
        self.cache.lock().expect("cache lock").insert(key, loaded.clone());
        loaded
    }
}

/// How batches are cut from the corpora.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub resize: usize,
    pub crop: usize,
    pub seed: u64,
}

/// One step's content and style images, `[B, 3, crop, crop]` each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: u64,
    pub content: Tensor,
    pub style: Tensor,
}

/// Generator dedicated to step `step`. Batches depend only on the seed and
/// the step number, so a resumed run sees the same data as an
/// uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn draw_crop(corpus: &Corpus, spec: &BatchSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    for _ in 0..MAX_REDRAWS {
        let index = rng.gen_range(0..corpus.len());
        let top_u: f64 = rng.gen();
        let left_u: f64 = rng.gen();
        if let Some(img) = corpus.resized(index, spec.resize, spec.crop) {
            let top = (top_u * (img.height() - spec.crop + 1) as f64) as usize;
            let left = (left_u * (img.width() - spec.crop + 1) as f64) as usize;
            return img.crop(top, left, spec.crop, spec.crop);
        }
    }
    Err(Error::EmptyCorpus(corpus.root().to_path_buf()))
}

/// Content and style crops for `step`, each sampled uniformly and
/// independently.
pub fn prepare_batch(content: &Corpus, style: &Corpus, spec: &BatchSpec, step: u64) -> Result<Batch> {
    let mut rng = step_rng(spec.seed, step);
    let mut cs = Vec::with_capacity(spec.batch_size);
    let mut ss = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        cs.push(draw_crop(content, spec, &mut rng)?);
        ss.push(draw_crop(style, spec, &mut rng)?);
    }
    Ok(Batch {
        step,
        content: Image::stack(&cs, DType::F32, &Device::Cpu)?,
        style: Image::stack(&ss, DType::F32, &Device::Cpu)?,
    })
}

/// Batches for a range of steps, prepared on a background thread and
/// handed over through a bounded queue in step order.
pub struct BatchStream {
    rx: Receiver<Result<Batch>>,
    worker: Option<JoinHandle<()>>,
}

impl BatchStream {
    pub fn spawn(content: Arc<Corpus>, style: Arc<Corpus>, spec: BatchSpec, steps: std::ops::Range<u64>, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = std::thread::spawn(move || {
            for step in steps {
                let batch = prepare_batch(&content, &style, &spec, step);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            worker: Some(worker),
        }
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_, dummy) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_corpus(dir: &Path, n: usize, h: usize, w: usize) {
        std::fs::create_dir_all(dir.join("nested")).unwrap();
        for i in 0..n {
            let img = Image::from_fn(h, w, |r, c| [(r * 7 + i) as f32 % 1.0, (c as f32 / w as f32), i as f32 / n as f32]).unwrap();
            let sub = if i % 2 == 0 { dir.to_path_buf() } else { dir.join("nested") };
            img.save(sub.join(format!("{i}.png"))).unwrap();
        }
    }

    #[test]
    fn discovery_is_recursive_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 4, 20, 30);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let c = Corpus::discover(dir.path()).unwrap();
        assert_eq!(c.len(), 4);
        let mut sorted = c.paths().to_vec();
        sorted.sort();
        assert_eq!(sorted, c.paths());
    }

    #[test]
    fn empty_corpus_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Corpus::discover(dir.path()), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn unreadable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 1, 20, 30);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let c = Corpus::discover(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        let spec = BatchSpec {
            batch_size: 6,
            resize: 16,
            crop: 16,
            seed: 1,
        };
        let b = prepare_batch(&c, &c, &spec, 0).unwrap();
        assert_eq!(b.content.dims(), &[6, 3, 16, 16]);
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 5, 24, 40);
        let c = Corpus::discover(dir.path()).unwrap();
        let spec = BatchSpec {
            batch_size: 8,
            resize: 24,
            crop: 16,
            seed: 9,
        };
        let a = prepare_batch(&c, &c, &spec, 3).unwrap();
        let b = prepare_batch(&c, &c, &spec, 3).unwrap();
        let other = prepare_batch(&c, &c, &spec, 4).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a.content.dims(), &[8, 3, 16, 16]);
        assert_eq!(v(&a.content), v(&b.content));
        assert_eq!(v(&a.style), v(&b.style));
        assert_ne!(v(&a.content), v(&other.content));

        let streamed: Vec<Batch> = BatchStream::spawn(Arc::new(c), Arc::new(Corpus::discover(dir.path()).unwrap()), spec, 2..5, 1)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(streamed.iter().map(|b| b.step).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(v(&streamed[1].content), v(&a.content));
    }

    #[test]
    fn dropping_a_stream_early_does_not_hang() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 16, 16);
        let c = Arc::new(Corpus::discover(dir.path()).unwrap());
        let spec = BatchSpec {
            batch_size: 1,
            resize: 16,
            crop: 16,
            seed: 0,
        };
        let mut s = BatchStream::spawn(c.clone(), c, spec, 0..1000, 2);
        assert!(s.next().unwrap().is_ok());
        drop(s);
    }
}
