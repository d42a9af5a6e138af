use std::path::{Path, PathBuf};

use pama::checkpoint::Checkpoint;
use pama::image::Image;
use pama::model::{weight_heatmap, PamaModel};
use pama::synth::{write_corpus, SynthKind};
use pama::trainer::{model_from_checkpoint, run, TrainConfig};
use pama::verify::run_all;

use crate::{exit, CmdResult, Failure};

/// Heatmap cells are repeated this many times per axis: one cell per
/// relu4_1 position, which covers 8x8 input pixels.
pub const HEATMAP_SCALE: usize = 8;

fn require(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::user(format!("{what} not found: {}", path.display())))
    }
}

pub fn load_model(checkpoint: &Path) -> Result<PamaModel, Failure> {
    require(checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(checkpoint)?;
    let (_, model) = model_from_checkpoint(&ck)?;
    Ok(model)
}

fn load_image(path: &Path, what: &str) -> Result<Image, Failure> {
    require(path, what)?;
    Ok(Image::load(path)?)
}

/// `out.png` -> `out.stage{i}.png`
pub fn stage_path(out: &Path, stage: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    out.with_file_name(format!("{stem}.stage{}.{ext}", stage + 1))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn stylize_one(model: &PamaModel, content: &Path, style: &Image, out: &Path, stages: bool) -> CmdResult {
    let content = load_image(content, "content image")?;
    model.stylize(&content, style)?.save(out)?;
    log::info!("wrote {}", out.display());
    if stages {
        for (i, img) in model.stylize_stages(&content, style)?.iter().enumerate() {
            let path = stage_path(out, i);
            img.save(&path)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub fn stylize(
    content: &Path,
    style: &Path,
    checkpoint: &Path,
    out: &Path,
    stages: bool,
    force_w: Option<f64>,
) -> CmdResult {
    require(content, "content")?;
    let style = load_image(style, "style image")?;
    let mut model = load_model(checkpoint)?;
    if let Some(w) = force_w {
        if !(0.0..=1.0).contains(&w) {
            return Err(Failure::user(format!("--force-w must lie in [0, 1], got {w}")));
        }
        model.options.force_w = Some(w);
    }
    if !content.is_dir() {
        return stylize_one(&model, content, &style, out, stages);
    }

    let mut inputs: Vec<PathBuf> = std::fs::read_dir(content)
        .map_err(pama::Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Failure::user(format!("no images in {}", content.display())));
    }
    std::fs::create_dir_all(out).map_err(pama::Error::from)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(inputs.len());
    let chunk = inputs.len().div_ceil(workers);
    // each worker owns its slice of inputs; the model is shared read-only
    std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| {
                let (model, style) = (&model, &style);
                scope.spawn(move || -> CmdResult {
                    for p in part {
                        let name = p.file_stem().unwrap_or_default().to_string_lossy();
                        stylize_one(model, p, style, &out.join(format!("{name}.png")), stages)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("stylize worker panicked"))
    })
}

pub fn inspect(content: &Path, style: &Path, checkpoint: &Path, out: &Path) -> CmdResult {
    let content = load_image(content, "content image")?;
    let style = load_image(style, "style image")?;
    let model = load_model(checkpoint)?;
    std::fs::create_dir_all(out).map_err(pama::Error::from)?;
    for (i, stage) in model.inspect(&content, &style)?.iter().enumerate() {
        let rearranged = out.join(format!("stage{}_rearranged.png", i + 1));
        stage.rearranged.save(&rearranged)?;
        let heat = weight_heatmap(&stage.weights, stage.grid_height, stage.grid_width, HEATMAP_SCALE)?;
        let weights = out.join(format!("stage{}_weights.png", i + 1));
        heat.save(&weights)?;
        println!("{}\n{}", rearranged.display(), weights.display());
    }
    Ok(())
}

pub fn train(config: &Path, resume: Option<&Path>, seed: Option<u64>) -> CmdResult {
    require(config, "config")?;
    if let Some(r) = resume {
        require(r, "resume checkpoint")?;
    }
    let mut config = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let outcome = run(&config, resume)?;
    println!("finished at step {}", outcome.final_step);
    println!("loss log: {}", outcome.log.display());
    if let Some(last) = outcome.checkpoints.last() {
        println!("checkpoint: {}", last.display());
    }
    Ok(())
}

pub fn verify(instances: usize, seed: u64, report: &Path) -> CmdResult {
    if instances == 0 {
        return Err(Failure::user("--instances must be at least 1"));
    }
    let checks = run_all(instances, seed)?;
    println!("{:<4} {:<44} {:>12} {:>10}  result", "crit", "check", "metric", "threshold");
    for c in &checks {
        println!(
            "{:<4} {:<44} {:>12.3e} {:>10.1e}  {}",
            c.criterion,
            c.name,
            c.metric,
            c.threshold,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    let passed = checks.iter().all(|c| c.passed);
    let json = serde_json::json!({
        "seed": seed,
        "instances": instances,
        "passed": passed,
        "checks": checks,
    });
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    std::fs::write(report, text).map_err(pama::Error::from)?;
    println!("report: {}", report.display());
    if passed {
        Ok(())
    } else {
        let failed = checks.iter().filter(|c| !c.passed).count();
        Err(Failure {
            code: exit::NUMERIC,
            message: format!("{failed} of {} checks failed", checks.len()),
        })
    }
}

pub fn synth(kind: SynthKind, count: usize, out: &Path, seed: u64) -> CmdResult {
    if count == 0 {
        return Err(Failure::user("--count must be at least 1"));
    }
    let paths = write_corpus(out, kind, count, seed)?;
    println!("wrote {} images to {}", paths.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_paths_keep_the_extension() {
        assert_eq!(stage_path(Path::new("a/out.png"), 0), PathBuf::from("a/out.stage1.png"));
        assert_eq!(stage_path(Path::new("res"), 2), PathBuf::from("res.stage3.png"));
    }
}
