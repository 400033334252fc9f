//! Deterministic built-in segmenter: brightest-pixel seed plus region growing.

use serde::{Deserialize, Serialize};

use super::{MarkerMask, PointPrompt, Segmenter};
use crate::gradient::GradientImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Side of the square search window centred on the prompt, pixels.
    pub window: usize,
    /// Pixels join the region while `value >= growth_ratio * seed`.
    pub growth_ratio: f64,
    /// Regions larger than this are rejected as misses.
    pub max_area: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            window: 31,
            growth_ratio: 0.3,
            max_area: 200,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParameter("window must be at least 1 px".into()));
        }
        if !(self.growth_ratio > 0.0 && self.growth_ratio <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "growth ratio must lie in (0, 1], got {}",
                self.growth_ratio
            )));
        }
        if self.max_area == 0 {
            return Err(Error::InvalidParameter("max_area must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct BaselineSegmenter {
    pub params: BaselineParams,
}

impl BaselineSegmenter {
    pub fn new(params: BaselineParams) -> Self {
        Self { params }
    }
}

impl Segmenter for BaselineSegmenter {
    fn segment(
        &mut self,
        _frame_index: usize,
        gbar: &GradientImage,
        prompts: &[PointPrompt],
    ) -> Result<Vec<MarkerMask>> {
        Ok(baseline_segment(gbar, prompts, &self.params))
    }
}

/// One mask per prompt. Within the `window`-sized square around the prompt
/// the brightest pixel seeds an 8-connected region of pixels at least
/// `growth_ratio` times as bright; growth never leaves the window. A flat
/// window or a region above `max_area` yields an empty mask.
pub fn baseline_segment(gbar: &GradientImage, prompts: &[PointPrompt], params: &BaselineParams) -> Vec<MarkerMask> {
    prompts.iter().map(|p| segment_one(gbar, p, params)).collect()
}

fn segment_one(gbar: &GradientImage, prompt: &PointPrompt, params: &BaselineParams) -> MarkerMask {
    let miss = MarkerMask::empty(prompt.marker_id.clone(), prompt.frame_index);
    let (rows, cols) = gbar.dim();
    let half = (params.window / 2) as isize;
    let pc = prompt.pixel.0.round() as isize;
    let pr = prompt.pixel.1.round() as isize;
    let c0 = (pc - half).max(0);
    let r0 = (pr - half).max(0);
    let c1 = (pc + half).min(cols as isize - 1);
    let r1 = (pr + half).min(rows as isize - 1);
    if c0 > c1 || r0 > r1 {
        return miss;
    }
    let (c0, r0, c1, r1) = (c0 as usize, r0 as usize, c1 as usize, r1 as usize);

    let mut seed = (0.0, 0usize, 0usize);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let v = gbar.values[[r, c]];
            if v > seed.0 {
                seed = (v, c, r);
            }
        }
    }
    let (peak, sc, sr) = seed;
    if !(peak > 0.0) {
        return miss;
    }

    let cut = params.growth_ratio * peak;
    let w = c1 - c0 + 1;
    let mut visited = vec![false; w * (r1 - r0 + 1)];
    let slot = |c: usize, r: usize| (r - r0) * w + (c - c0);
    let mut stack = vec![(sc, sr)];
    visited[slot(sc, sr)] = true;
    let mut pixels = Vec::new();
    while let Some((c, r)) = stack.pop() {
        pixels.push((c, r));
        if pixels.len() > params.max_area {
            return miss;
        }
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let nc = c as isize + dc;
                let nr = r as isize + dr;
                if nc < c0 as isize || nr < r0 as isize || nc > c1 as isize || nr > r1 as isize {
                    continue;
                }
                let (nc, nr) = (nc as usize, nr as usize);
                if !visited[slot(nc, nr)] && gbar.values[[nr, nc]] >= cut {
                    visited[slot(nc, nr)] = true;
                    stack.push((nc, nr));
                }
            }
        }
    }
    pixels.sort_unstable_by_key(|&(c, r)| (r, c));
    MarkerMask {
        marker_id: prompt.marker_id.clone(),
        frame_index: prompt.frame_index,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn prompt(col: f64, row: f64) -> PointPrompt {
        PointPrompt {
            marker_id: "M1".into(),
            frame_index: 0,
            pixel: (col, row),
        }
    }

    fn image(f: impl Fn(usize, usize) -> f64) -> GradientImage {
        GradientImage {
            values: Array2::from_shape_fn((80, 80), |(r, c)| f(c, r)),
            mu: None,
        }
    }

    #[test]
    fn recovers_known_blob() {
        // 20-pixel blob: 5 columns x 4 rows centred on (40.0, 30.5)
        let g = image(|c, r| {
            if (38..=42).contains(&c) && (29..=32).contains(&r) {
                100.0
            } else {
                0.0
            }
        });
        let masks = baseline_segment(&g, &[prompt(43.2, 33.0)], &BaselineParams::default());
        assert_eq!(masks[0].pixels.len(), 20);
        let (cc, cr) = masks[0].center().unwrap();
        assert!((cc - 40.0).abs() < 0.5 && (cr - 30.5).abs() < 0.5);
    }

    #[test]
    fn flat_window_misses() {
        let g = image(|_, _| 0.0);
        let masks = baseline_segment(&g, &[prompt(40.0, 40.0)], &BaselineParams::default());
        assert!(masks[0].is_empty());
    }

    #[test]
    fn growth_cannot_jump_a_gap() {
        let g = image(|c, r| {
            let a = (30..=32).contains(&c) && (30..=32).contains(&r);
            let b = (36..=38).contains(&c) && (30..=32).contains(&r);
            if a {
                90.0
            } else if b {
                80.0
            } else {
                0.0
            }
        });
        let masks = baseline_segment(&g, &[prompt(34.0, 31.0)], &BaselineParams::default());
        assert_eq!(masks[0].pixels.len(), 9);
        assert!(masks[0].pixels.iter().all(|&(c, _)| c <= 32));
    }

    #[test]
    fn oversized_region_misses() {
        let g = image(|_, _| 5.0);
        let params = BaselineParams {
            max_area: 200,
            ..Default::default()
        };
        // the whole 31x31 window qualifies: 961 px > 200
        assert!(baseline_segment(&g, &[prompt(40.0, 40.0)], &params)[0].is_empty());
    }

    #[test]
    fn masks_stay_inside_window() {
        // a long bright bar crossing the window
        let g = image(|_, r| if r == 40 { 50.0 } else { 0.0 });
        let params = BaselineParams::default();
        let m = &baseline_segment(&g, &[prompt(40.0, 40.0)], &params)[0];
        assert_eq!(m.pixels.len(), 31);
        assert!(m.pixels.iter().all(|&(c, r)| (25..=55).contains(&c) && r == 40));
    }

    #[test]
    fn window_clipped_at_border() {
        let g = image(|c, r| if c < 2 && r < 2 { 10.0 } else { 0.0 });
        let m = &baseline_segment(&g, &[prompt(0.0, 0.0)], &BaselineParams::default())[0];
        assert_eq!(m.pixels.len(), 4);
    }
}
