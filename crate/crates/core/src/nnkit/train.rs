//! Training loop, checkpoints and loss curves for [`ToyModel`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::adam::{Adam, AdamConfig};
use crate::nnkit::model::{ToyModel, ToyModelConfig};
use crate::nnkit::param::ParamStore;
use crate::nnkit::tape::Tape;
use crate::nnkit::tensor::Tensor;
use crate::tensorio::{read_tensor, write_tensor, SceneData, TensorFile, TensorValues};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const LOSS_CURVE: &str = "loss_curve.txt";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// `losses[t]` is the batch loss at iteration `t`, before its update.
    /// The last entry follows the final update and has no update of its own.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

/// Views used at iteration `t`: a scene index and a shuffled choice of views.
pub fn batch_for(config: &ToyModelConfig, scenes: &[SceneData], t: usize) -> (usize, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0000_0000 ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let s = rng.random_range(0..scenes.len());
    let mut order: Vec<usize> = (0..scenes[s].num_views()).collect();
    order.shuffle(&mut rng);
    order.truncate(config.views);
    (s, order)
}

fn check_dataset(config: &ToyModelConfig, scenes: &[SceneData]) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.num_views() < config.views {
            return Err(Error::invalid(format!(
                "scene {i} has {} views, training uses {} per step",
                s.num_views(),
                config.views
            )));
        }
        if s.grid.resolution != config.grid_resolution {
            return Err(Error::shape(format!(
                "scene {i} grid is {}^3, model grid is {}^3",
                s.grid.resolution, config.grid_resolution
            )));
        }
    }
    Ok(())
}

/// Train for `iters` Adam steps. Every step uses one scene and a shuffled
/// subset of its views drawn from the run seed.
pub fn train_toy(model: &mut ToyModel, scenes: &[SceneData], iters: usize) -> Result<TrainReport> {
    check_dataset(&model.config, scenes)?;
    let start = Instant::now();
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            lr: model.config.lr,
            ..Default::default()
        },
    );
    let mut losses = Vec::with_capacity(iters + 1);
    for t in 0..=iters {
        let (s, views) = batch_for(&model.config, scenes, t);
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &scenes[s], &views)?;
        let value = tape.value(loss).item();
        losses.push(value);
        if t == iters {
            break;
        }
        let grads = tape.backward(loss);
        model.store.zero_grads();
        grads.accumulate_into(&mut model.store);
        adam.step(&mut model.store);
        if t % 10 == 0 {
            info!("iter {t} scene {s} loss {value:.6} ({:.1}s)", start.elapsed().as_secs_f64());
        }
    }
    Ok(TrainReport {
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean loss over every scene, each seen through its first `views` views.
pub fn dataset_loss(model: &ToyModel, scenes: &[SceneData]) -> Result<f64> {
    check_dataset(&model.config, scenes)?;
    let views: Vec<usize> = (0..model.config.views).collect();
    let mut sum = 0.0;
    for s in scenes {
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, s, &views)?;
        sum += tape.value(l).item();
    }
    Ok(sum / scenes.len() as f64)
}

pub fn format_loss_curve(losses: &[f64]) -> String {
    let mut s = String::new();
    for (t, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{t} {l}");
    }
    s
}

pub fn parse_loss_curve(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace();
            let bad = || Error::TextFormat {
                path: PathBuf::from(LOSS_CURVE),
                line: i + 1,
                detail: format!("expected `iter loss`, got {l:?}"),
            };
            let _iter: usize = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let loss: f64 = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            Ok(loss)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: ToyModelConfig,
    params: Vec<ManifestEntry>,
}

/// One 32-bit tensor file per parameter plus a JSON manifest.
pub fn save_checkpoint(dir: &Path, config: &ToyModelConfig, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter().enumerate() {
        let file = format!("param_{id:03}.lsmt");
        let tf = TensorFile::f32_from_f64(p.shape().to_vec(), p.value.data())?;
        write_tensor(&dir.join(&file), &tf)?;
        params.push(ManifestEntry {
            id,
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        params,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Rebuild a model from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<ToyModel> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut model = ToyModel::new(manifest.config)?;
    let mut loaded = ParamStore::new();
    for e in &manifest.params {
        let tf = read_tensor(&dir.join(&e.file))?;
        if tf.dims != e.shape {
            return Err(Error::shape(format!(
                "{}: file holds {:?}, manifest says {:?}",
                e.file, tf.dims, e.shape
            )));
        }
        let values = match &tf.values {
            TensorValues::F32(_) => tf.values.to_f64(),
            TensorValues::U8(_) => return Err(Error::invalid(format!("{}: parameters must be f32", e.file))),
        };
        loaded.add(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    model.store.load_values(&loaded)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_curve_round_trip() {
        let l = vec![0.7, 0.5, 0.25];
        let text = format_loss_curve(&l);
        assert_eq!(text.lines().next(), Some("0 0.7"));
        assert_eq!(parse_loss_curve(&text).unwrap(), l);
        assert!(parse_loss_curve("0 x\n").is_err());
    }
}
