//! Browser bindings for the demo page in `www/`: model accounting, chunk
//! masks and learning-rate curves. Each export has a plain Rust twin so the
//! logic is testable off the browser.

use nextformer::accounting::{count_flops, count_params};
use nextformer::config::check_chunk;
use nextformer::encoder::chunk_mask_at;
use nextformer::schedule::{LrSchedule, ScheduleKind};
use nextformer::{ModelConfig, Preset};
use wasm_bindgen::prelude::*;

/// `{"preset", "params", "flops"}` as JSON.
pub fn describe_json(preset: &str, cnn8: bool, frames: usize) -> nextformer::Result<String> {
    let mut cfg = ModelConfig::preset(preset.parse::<Preset>()?);
    if cnn8 {
        cfg = cfg.with_cnn8();
    }
    let v = serde_json::json!({
        "preset": cfg.name,
        "params": count_params(&cfg),
        "flops": count_flops(&cfg, frames),
    });
    Ok(v.to_string())
}

/// Row-major `t × t` visibility, 1 where query `i` may attend to key `j`.
/// A chunk of 0 means full attention.
pub fn mask_bits(t: usize, chunk: usize) -> nextformer::Result<Vec<u8>> {
    let size = match chunk {
        0 => None,
        c => {
            check_chunk(c)?;
            Some(c)
        }
    };
    let m = chunk_mask_at(0, t, t, size);
    Ok((0..t)
        .flat_map(|i| m.row(i).iter().map(|&b| b as u8).collect::<Vec<_>>())
        .collect())
}

/// Rate at the last step of each epoch.
pub fn lr_per_epoch(
    schedule: &str,
    epochs: u64,
    steps_per_epoch: u64,
    warmup_steps: u64,
    peak_lr: f64,
) -> nextformer::Result<Vec<f64>> {
    let kind: ScheduleKind = schedule.parse()?;
    let s = LrSchedule {
        warmup_steps,
        peak_lr,
        ..LrSchedule::new(kind)
    };
    Ok((1..=epochs)
        .map(|e| s.lr_at(e * steps_per_epoch.max(1), e))
        .collect())
}

fn js(e: nextformer::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn describe(preset: &str, cnn8: bool, frames: usize) -> Result<String, JsError> {
    describe_json(preset, cnn8, frames).map_err(js)
}

#[wasm_bindgen]
pub fn chunk_mask(t: usize, chunk: usize) -> Result<Vec<u8>, JsError> {
    mask_bits(t, chunk).map_err(js)
}

#[wasm_bindgen]
pub fn lr_curve(
    schedule: &str,
    epochs: u64,
    steps_per_epoch: u64,
    warmup_steps: u64,
    peak_lr: f64,
) -> Result<Vec<f64>, JsError> {
    lr_per_epoch(schedule, epochs, steps_per_epoch, warmup_steps, peak_lr).map_err(js)
}
