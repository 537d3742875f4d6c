use chrono::{TimeZone, Utc};
use std::time::Instant;
use sunsoak::buffer::BufferParams;
use sunsoak::fqi::{self, FqiConfig, Regressor};
use sunsoak::loss::LossModel;
use sunsoak::series::ForecastSeries;
use sunsoak::tap::fit_tap_model;
use sunsoak::trees::TreeParams;

fn main() {
    let t0 = Utc.with_ymd_and_hms(2016, 9, 5, 0, 0, 0).unwrap();
    let history: Vec<(sunsoak::Timestamp, f64)> = (0..(14 * 288))
        .map(|k| {
            let step_of_day = k % 288;
            let v = match step_of_day {
                84..=96 => if k % 3 == 0 { 12.0 } else { 0.0 },
                150..=156 => if k % 5 == 0 { 6.0 } else { 0.0 },
                228..=252 => if k % 4 == 0 { 10.0 } else { 0.0 },
                _ => 0.0,
            };
            (t0 + chrono::Duration::minutes(5 * k), v)
        })
        .collect();
    let tap = fit_tap_model(&history, 60).unwrap();
    let loss = LossModel::from_knot_values([60.0, 90.0, 120.0, 150.0, 180.0]).unwrap();
    let pv: Vec<f64> = (0..24)
        .map(|h| {
            let hf = h as f64;
            if (6.0..=20.0).contains(&hf) {
                4.0 * (std::f64::consts::PI * (hf - 6.0) / 14.0).sin()
            } else {
                0.0
            }
        })
        .collect();
    let pv = ForecastSeries::new(t0, 60, pv).unwrap();
    let params = BufferParams::default();

    let time_cfg = |label: &str, config: &FqiConfig| {
        let _ = fqi::fit_policy(config, t0, &tap, &loss, &pv, 10.0, &params).unwrap();
        let start = Instant::now();
        let n = 20;
        for i in 0..n {
            let mut c = config.clone();
            c.seed = i;
            let p = fqi::fit_policy(&c, t0, &tap, &loss, &pv, 10.0, &params).unwrap();
            std::hint::black_box(p.q_value(1, 0.5, sunsoak::Action::Delay).unwrap());
        }
        println!("{label}: {:?} per refit", start.elapsed() / n as u32);
    };

    time_cfg("default (trees 50, L=200)", &FqiConfig::default());
    time_cfg("tabular, L=200", &FqiConfig { regressor: Regressor::Tabular, ..FqiConfig::default() });
    time_cfg("trees 50, L=1", &FqiConfig { samples_per_point: 1, ..FqiConfig::default() });
    time_cfg("trees 20, L=200", &FqiConfig {
        regressor: Regressor::ExtraTrees(TreeParams { n_trees: 20, ..TreeParams::default() }),
        ..FqiConfig::default()
    });
}
