//! Local interaction autoregressive models for gridded time series.
//!
//! A series lives on a regular `d`-dimensional grid. Each site evolves as a
//! linear function of the recent past of a small neighborhood around it:
//!
//! ```text
//! X_t(s) = sum_{p=1..P} sum_{j in N(s)} a_p(s, j) X_{t-p}(j) + e_t(s)
//! ```
//!
//! The crate simulates such processes, fits the kernels site by site, selects
//! neighborhood sizes with a BIC criterion, fits a low-rank separable variant
//! on matrix grids, and evaluates forecasts against simple baselines.

pub mod cli;
pub mod error;
pub mod evaluate;
pub mod fit;
pub mod grid;
pub mod gts;
pub mod kernel;
pub mod linalg;
pub mod neighborhood;
pub mod rng;
pub mod select;
pub mod separable;
pub mod simulate;

pub use error::{LiarError, Result};
pub use evaluate::{autocov, baseline_mar_als, baseline_pixel_ar, forecast, rmse, ForecastResult, MarFit, OneStepPredictor};
pub use fit::{assemble_design, fit_all, fit_all_with, fit_site, DesignBlock, FitReport, FitStrategy, SiteFit};
pub use grid::{GridSeries, Shape, SiteIndex};
pub use kernel::{KernelField, SiteKernel};
pub use neighborhood::{Neighborhood, NeighborhoodFamily};
pub use select::{select_all, select_site, BicTrace, Candidates, SelectionReport};
pub use separable::{assemble_block, fit_spliar, scatter, BlockKernelMatrix, SpliarFit};
pub use simulate::{operator_norm, simulate_liar, LiarSimulator, NoiseKind, NoiseSpec};
