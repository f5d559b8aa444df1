use ghd_core::models;
use ghd_core::partitioning::RaySolution;
use ghd_core::spectral::QuadratureScheme;
use ghd_core::tba::{DrivingTerm, GgeState, TbaOptions};
use std::sync::Arc;

fn ll_state(mu: f64) -> GgeState {
    let model = Arc::new(models::lieb_liniger(1.0).unwrap());
    let grid = model.build_grid(6.0, 48, QuadratureScheme::GaussLegendre).unwrap();
    let kernel = Arc::new(model.kernel_operator(&grid).unwrap());
    let w = DrivingTerm::from_betas(&model, &grid, &[(3, 1.0), (1, -mu)]).unwrap();
    GgeState::solve(&model, &grid, &kernel, &w, &TbaOptions::default()).unwrap()
}

fn main() {
    let xi: Vec<f64> = (0..281).map(|i| -14.0 + 28.0 * i as f64 / 280.0).collect();
    let ray = RaySolution::solve(ll_state(1.0), ll_state(0.4), xi).unwrap();
    let k = 8usize;
    let star = ray.fixed_ray[k];
    let v_l = ray.left.effective_velocity()[k];
    let v_r = ray.right.effective_velocity()[k];
    println!("k={k} theta={} star={star} v_l={v_l} v_r={v_r}", ray.grid.rapidity(k));
    // brute-force integral with fresh ray solves, high resolution
    let n = 4000;
    let a = -14.0;
    let b = 14.0;
    let h = (b - a) / n as f64;
    let mut total: f64 = 0.0;
    let mut prev: Option<f64> = None;
    for i in 0..=n {
        let eta = a + h * i as f64;
        let g = if (eta - star).abs() < 0.05 {
            // skip the removable point with the quadratic limit
            let hh = 0.4;
            let vp = ray.state_at_ray(star + hh).unwrap().effective_velocity()[k];
            let vm = ray.state_at_ray(star - hh).unwrap().effective_velocity()[k];
            let c2 = (vp + vm - 2.0 * star) / (hh * hh);
            0.5 * c2 / (1.0 - 0.5 * c2 * (eta - star))
        } else {
            let v = ray.state_at_ray(eta).unwrap().effective_velocity()[k];
            (v - star) / ((eta - v) * (eta - star))
        };
        if let Some(p) = prev { total += 0.5 * h * (p + g); }
        prev = Some(g);
    }
    // analytic tails beyond the window
    let tail_l = ((v_l - a) / (star - a)).ln();
    let tail_r = -((b - v_r) / (b - star)).ln(); // int_b^inf [1/(e-v_r)-1/(e-star)] = -ln((b-v_r)/(b-star))
    println!("brute I_inf = {}", total + tail_l + tail_r);
    println!("module  I(b) + tail_r = {}", {
        // recompute via the module path: u_tilde at b over (b - v_r)
        let u = ray.u_tilde_row(b).unwrap()[k];
        (u / (b - star)).ln() + tail_r
    });
}
