//! Grid evaluations of the exact denoising posterior `p(x_0 | x_t)` for
//! contour panels, plus the marker points drawn on top of them.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};

use super::{fmt, write_table};

pub const GRID_HEADER: [&str; 5] = ["panel", "t", "x", "y", "density"];
pub const POINTS_HEADER: [&str; 5] = ["panel", "t", "kind", "x", "y"];

#[derive(Clone, Debug, Serialize)]
pub struct Panel {
    pub t: usize,
    pub x_t: Vec<f64>,
    /// Clean point `x_t` was generated from, when it was generated here.
    pub true_x0: Option<Vec<f64>>,
    pub posterior_mean: Vec<f64>,
    /// Row-major over `ys` then `xs`.
    #[serde(skip)]
    pub density: Vec<f64>,
    #[serde(skip)]
    pub axis: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PosteriorPanels {
    pub panels: Vec<Panel>,
}

impl PosteriorPanels {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut grid = Vec::new();
        let mut points = Vec::new();
        for (p, panel) in self.panels.iter().enumerate() {
            let g = panel.axis.len();
            for (iy, y) in panel.axis.iter().enumerate() {
                for (ix, x) in panel.axis.iter().enumerate() {
                    grid.push(vec![
                        p.to_string(),
                        panel.t.to_string(),
                        fmt(*x),
                        fmt(*y),
                        fmt(panel.density[iy * g + ix]),
                    ]);
                }
            }
            let mut marks = vec![("x_t", &panel.x_t), ("posterior_mean", &panel.posterior_mean)];
            if let Some(x0) = &panel.true_x0 {
                marks.push(("true_x0", x0));
            }
            for (kind, v) in marks {
                points.push(vec![p.to_string(), panel.t.to_string(), kind.to_string(), fmt(v[0]), fmt(v[1])]);
            }
        }
        let g = dir.join("posterior_grid.csv");
        write_table(&g, &GRID_HEADER, &grid)?;
        let q = dir.join("posterior_points.csv");
        write_table(&q, &POINTS_HEADER, &points)?;
        Ok(vec![g, q])
    }
}

/// `n` evenly spaced points on `[-extent, extent]`.
pub fn axis(extent: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -extent + 2.0 * extent * i as f64 / (n - 1) as f64).collect()
}

pub fn run_posterior_panels(cfg: &RunConfig) -> Result<PosteriorPanels> {
    let r = cfg.resolve()?;
    if r.model.dim() != 2 {
        return Err(Error::config("model", "posterior panels need a 2-dimensional model"));
    }
    let spec = &cfg.posterior;
    let ax = axis(spec.extent, spec.grid);
    let mut panels = Vec::new();
    for (i, &t) in spec.t.iter().enumerate() {
        let ab = r.schedule.alpha_bar(t);
        let (x_t, true_x0) = match spec.x_t.get(i) {
            Some(x) => (x.clone(), None),
            None => {
                let mut rng = StreamKey::new(cfg.seed, Purpose::Study).sample(i as u32).rng();
                let (x0, xt) = draw_from_component(&r.model, r.target_class, ab, &mut rng);
                (xt, Some(x0))
            }
        };
        let post = r.model.denoising_posterior(ab, &x_t)?;
        let mut density = Vec::with_capacity(ax.len() * ax.len());
        for y in &ax {
            for x in &ax {
                density.push(post.log_density(&[*x, *y]).exp());
            }
        }
        panels.push(Panel {
            t,
            posterior_mean: post.mean(),
            x_t,
            true_x0,
            density,
            axis: ax.clone(),
        });
    }
    Ok(PosteriorPanels { panels })
}

fn draw_from_component<R: rand::Rng + ?Sized>(
    model: &crate::gmm::GmmModel,
    k: usize,
    alpha_bar: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    use rand_distr::StandardNormal;
    let sd = model.sigma0_sq().sqrt();
    let x0: Vec<f64> = model.means()[k]
        .iter()
        .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let xt = x0.iter().map(|v| a * v + b * rng.sample::<f64, _>(StandardNormal)).collect();
    (x0, xt)
}
