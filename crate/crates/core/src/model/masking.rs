use super::MaskConfig;
use crate::envs::{MultiViewObservation, CHANNELS};
use rand::Rng;

/// Zeroes random cubes (`cube_size²` pixels × `cube_depth` frames, all
/// channels) of one frame-stacked view until at least `ratio` of its
/// pixel-frames are masked. Returns the masked fraction.
pub fn cube_mask<R: Rng + ?Sized>(view: &mut [f64], frames: usize, size: usize, cfg: &MaskConfig, rng: &mut R) -> f64 {
    let plane = size * size;
    let total = frames * plane;
    if cfg.mask_ratio <= 0.0 {
        return 0.0;
    }
    if cfg.mask_ratio >= 1.0 {
        view.iter_mut().for_each(|x| *x = 0.0);
        return 1.0;
    }
    let cube = cfg.cube_size.min(size);
    let depth = cfg.cube_depth.min(frames);
    let mut masked = vec![false; total];
    let mut count = 0usize;
    while (count as f64) < cfg.mask_ratio * total as f64 {
        let y0 = rng.random_range(0..=size - cube);
        let x0 = rng.random_range(0..=size - cube);
        let f0 = rng.random_range(0..=frames - depth);
        for f in f0..f0 + depth {
            for y in y0..y0 + cube {
                for x in x0..x0 + cube {
                    let k = f * plane + y * size + x;
                    if !masked[k] {
                        masked[k] = true;
                        count += 1;
                        for c in 0..CHANNELS {
                            view[(f * CHANNELS + c) * plane + y * size + x] = 0.0;
                        }
                    }
                }
            }
        }
    }
    count as f64 / total as f64
}

/// Applies [`cube_mask`] to every present view independently.
pub fn cube_mask_observation<R: Rng + ?Sized>(
    obs: &MultiViewObservation,
    cfg: &MaskConfig,
    rng: &mut R,
) -> MultiViewObservation {
    let mut out = obs.clone();
    let frames = obs.channels / CHANNELS;
    for v in 0..out.n_views() {
        if !out.is_missing(v) {
            cube_mask(&mut out.views[v], frames, obs.height, cfg, rng);
        }
    }
    out
}
