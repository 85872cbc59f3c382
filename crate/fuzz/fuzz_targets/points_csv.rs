#![no_main]
use gmlp::training::{fit_power_law, parse_points_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(points) = parse_points_csv(s) {
            assert!(points.iter().all(|&(x, y)| x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()));
            let _ = fit_power_law(&points);
        }
    }
});
