//! Scratch probe: does refining the raster/solver grid beyond 4 cells per
//! obstacle radius move the linearised bracket gaps?

use std::sync::Arc;

use sclab::geom::{ball_volume, AxisBox};
use sclab::grid::TorusGrid;
use sclab::harness::{linearized_gap_pair, transport_medium};
use sclab::medium::{sample_stable_measure, truncation_bias_bound, Boundary, MediumField, SampleConfig};
use sclab::pde::{critical_index, ScalingConfig};
use sclab::medium::MediumRaster;
use sclab::rng::derive_seed;
use sclab::testfn::TestFunction;
use sclab::brownian::MeasureSpec;

fn main() {
    let d = 3usize;
    let gamma = 0.8;
    let rho = 1.0;
    let side = 1.0;
    let t = 0.4;
    let theta = 0.1;
    let k = 16.0f64;
    let kappa = critical_index(gamma, d).unwrap();
    let phi = TestFunction::ConstantOnTorus { d, theta };
    let mu = MeasureSpec::LebesgueBox {
        support: AxisBox::new(vec![0.0; 3], vec![1.0; 3]).unwrap(),
        density: 1.0,
    };
    let base_cfg = SampleConfig {
        gamma,
        eps_min: 0.005,
        window: AxisBox::new(vec![0.0; 3], vec![side; 3]).unwrap(),
        pad: 0.0,
    };
    let media = 12usize;
    // resolution multiplier x cells-per-radius 4 -> {32, 64}; steps {64, 128}
    for (resolution, steps) in [(64usize, 64usize), (64, 128), (64, 256), (64, 512)] {
        let mut wsum = 0.0;
        let mut msum = 0.0;
        for rep in 0..media {
            let seed = derive_seed(4242, rep as u64);
            let base = sample_stable_measure(&base_cfg, seed).unwrap();
            let moved = transport_medium(&base, k).unwrap();
            let eps = moved.config.eps_min;
            let mut field = MediumField::new(Arc::new(moved), k, Boundary::Periodic).unwrap();
            let grid = TorusGrid::new(d, resolution, side).unwrap();
            let raster = field.rasterize(&grid).unwrap();
            let mut values = raster.values.clone();
            let dust = ball_volume(d, 1.0) * truncation_bias_bound(gamma, eps, 1.0);
            let clip = 40.0 * k.powi(d as i32) / rho;
            for v in values.iter_mut() {
                *v = (*v + dust).min(clip);
            }
            let max = values.iter().copied().fold(0.0f64, f64::max);
            let raster = MediumRaster { grid: grid.clone(), values };
            let needed = (t * k.powf(2.0 - d as f64) * rho * max * theta
                * k.powf(kappa)
                / 5.0)
                .ceil() as usize;
            let cfg = ScalingConfig {
                d,
                gamma,
                rho,
                k,
                kappa,
                t,
                time_steps: steps.max(needed),
                snapshots: 1,
                side,
                resolution,
            };
            let (gw, gm) = linearized_gap_pair(&cfg, &raster, &phi, &mu).unwrap();
            wsum += gw;
            msum += gm;
        }
        println!(
            "resolution {resolution:3} steps {steps:3}: w {:.6} m {:.6}",
            wsum / media as f64,
            msum / media as f64
        );
    }
}
