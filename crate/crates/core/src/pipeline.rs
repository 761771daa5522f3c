//! File-level entry points: checkpoints, enhancement of an image/event pair
//! on disk, and image-quality reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::autodiff::ModelParams;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{parse_events, EventFormat};
use crate::image_io::{read_pnm, write_atomic};
use crate::losses::{ms_ssim, psnr, ssim};
use crate::model::{event_voxels, EvRwkv};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

impl Metrics {
    /// Quality of `x` against the reference `y`, both in `[0, 1]`.
    pub fn compute(x: &Tensor, y: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(x, y, 1.0)?,
            ssim: ssim(x, y)?,
            ms_ssim: ms_ssim(x, y)?,
        })
    }
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut bytes = Vec::new();
    params.write_to(BufWriter::new(&mut bytes))?;
    write_atomic(path, &bytes)
}

/// Loads a checkpoint and checks it against the parameters `model` would
/// create.
pub fn load_checkpoint(path: &Path, expected: &ModelParams) -> Result<ModelParams> {
    let params = ModelParams::read_from(BufReader::new(File::open(path)?))?;
    expected.check_compatible(&params)?;
    Ok(params)
}

/// A gray image is replicated to three channels.
pub fn as_rgb(img: Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    match c {
        3 => Ok(img),
        1 => {
            let plane = img.into_data();
            let data = [plane.as_slice(), &plane, &plane].concat();
            Tensor::new(&[3, h, w], data)
        }
        _ => Err(Error::shape(format!("expected 1 or 3 channels, got {c}"))),
    }
}

#[derive(Clone, Debug, Default)]
pub struct EnhanceRequest<'a> {
    pub checkpoint: Option<&'a Path>,
    /// Event time window in microseconds; the span of the stream if unset.
    pub window: Option<(u64, u64)>,
    /// Inferred from the extension if unset.
    pub event_format: Option<EventFormat>,
    pub ground_truth: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct EnhancementResult {
    /// Enhanced image clamped to `[0, 1]`.
    pub image: Tensor,
    pub metrics: Option<Metrics>,
}

pub fn enhance_files(image: &Path, events: &Path, cfg: &RunConfig, req: &EnhanceRequest) -> Result<EnhancementResult> {
    let (model, fresh) = EvRwkv::new(cfg)?;
    let params = match req.checkpoint {
        Some(p) => load_checkpoint(p, &fresh)?,
        None => fresh,
    };
    let low = as_rgb(read_pnm(image)?)?;
    let (_, h, w) = low.dims3()?;
    cfg.check_extent(h, w)?;
    let format = req.event_format.unwrap_or_else(|| EventFormat::from_path(events));
    let stream = parse_events(events, format, Some((h, w)))?;
    let voxels = event_voxels(&stream, cfg, req.window, h, w)?;
    let out = model.enhance(&params, &low, &voxels)?.map(|v| v.clamp(0.0, 1.0));
    let metrics = match req.ground_truth {
        Some(gt) => Some(Metrics::compute(&out, &as_rgb(read_pnm(gt)?)?)?),
        None => None,
    };
    Ok(EnhancementResult { image: out, metrics })
}

/// Pretty JSON plus a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.write_all(b"\n")?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, EventStream};
    use crate::image_io::{encode_pnm, write_pnm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> RunConfig {
        RunConfig {
            channels: 4,
            bins: 4,
            image_size: 16,
            ..Default::default()
        }
    }

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform(&[3, 16, 16], 0.2, &mut rng).map(|v| v + 0.3);
        let ip = dir.join("low.ppm");
        write_pnm(&ip, &img).unwrap();
        let ev = (0..50u16)
            .map(|i| Event { t: i as u64 * 10, x: i % 16, y: i / 4 % 16, polarity: if i % 3 == 0 { -1 } else { 1 } })
            .collect();
        let ep = dir.join("ev.csv");
        EventStream::new(ev, Some((16, 16))).unwrap().save(&ep, EventFormat::Csv).unwrap();
        (ip, ep)
    }

    #[test]
    fn enhance_is_deterministic_and_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, ep) = fixture(dir.path());
        let req = EnhanceRequest { ground_truth: Some(&ip), ..Default::default() };
        let a = enhance_files(&ip, &ep, &tiny(), &req).unwrap();
        let b = enhance_files(&ip, &ep, &tiny(), &req).unwrap();
        assert_eq!(a.image.shape(), [3, 16, 16]);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(encode_pnm(&a.image).unwrap(), encode_pnm(&b.image).unwrap());
        assert!(a.metrics.unwrap().psnr_db.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (_, params) = EvRwkv::new(&tiny()).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params).unwrap();
        assert_eq!(load_checkpoint(&path, &params).unwrap(), params);
        let (_, wider) = EvRwkv::new(&RunConfig { channels: 8, ..tiny() }).unwrap();
        assert!(load_checkpoint(&path, &wider).is_err());
    }

    #[test]
    fn mismatched_events_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = fixture(dir.path());
        let ep = dir.path().join("far.csv");
        std::fs::write(&ep, "0,40,1,1\n").unwrap();
        assert!(enhance_files(&ip, &ep, &tiny(), &EnhanceRequest::default()).is_err());
    }

    #[test]
    fn gray_is_replicated() {
        let g = Tensor::new(&[1, 1, 2], vec![0.25, 0.5]).unwrap();
        assert_eq!(as_rgb(g).unwrap().data(), [0.25, 0.5, 0.25, 0.5, 0.25, 0.5]);
        assert!(as_rgb(Tensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn metrics_of_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 32, 32], 0.5, &mut rng).map(|v| v + 0.5);
        let m = Metrics::compute(&x, &x).unwrap();
        assert!(m.psnr_db.is_infinite());
        assert!((m.ssim - 1.0).abs() < 1e-12 && (m.ms_ssim - 1.0).abs() < 1e-9);
    }
}
