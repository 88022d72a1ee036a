//! Seeded synthetic country panels with the same columns as the real data.
//!
//! Two latent factors drive the table: an economic one and a governance one.
//! The five governance-heavy columns load almost entirely on the governance
//! factor, so they are strongly collinear, as in the real panel.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Schema, DEFAULT_ID_COLUMN};

/// One generated row per country, in schema column order.
pub fn synthetic_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    (0..n)
        .map(|_| {
            let e = z();
            let g = 0.6 * e + 0.8 * z();
            let sdg = 70.0 + 5.0 * e + 2.0 * g + 3.0 * z();
            let happiness = 5.5 + 0.45 * e + 0.25 * g + 0.04 * (sdg - 70.0) + 0.45 * z();
            vec![
                happiness,
                sdg,
                9.0 + 1.1 * e + 0.3 * g + 0.3 * z(),
                60.0 + 18.0 * e + 20.0 * z(),
                72.0 + 4.0 * e + 1.5 * g + 2.5 * z(),
                (7.0 + 3.0 * z()).abs(),
                60.0 + 6.0 * g + 5.0 * z(),
                g + 0.15 * z(),
                g + 0.15 * z(),
                0.6 * g + 0.7 * z(),
                g + 0.15 * z(),
                g + 0.15 * z(),
                0.6 * g + 0.7 * z(),
                60.0 + 7.0 * g + 2.0 * e + 1.2 * z(),
            ]
        })
        .collect()
}

/// CSV text for `n` synthetic countries keyed by `iso3`, with roughly
/// `missing_rate` of the variable cells left blank.
pub fn synthetic_panel_csv(n: usize, missing_rate: f64, seed: u64) -> String {
    let schema = Schema::country_panel();
    let rows = synthetic_rows(n, seed);
    let mut blank = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b1a4);
    let mut out = String::from(DEFAULT_ID_COLUMN);
    for c in schema.codes() {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&format!("C{:03}", i + 1));
        for v in row {
            out.push(',');
            if blank.random::<f64>() >= missing_rate {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{complete_cases, read_csv};

    #[test]
    fn panel_parses_with_expected_missingness() {
        let text = synthetic_panel_csv(120, 0.03, 1);
        let d = read_csv(text.as_bytes(), &Schema::country_panel(), DEFAULT_ID_COLUMN).unwrap();
        assert_eq!((d.n(), d.p()), (120, 14));
        let cc = complete_cases(&d).unwrap();
        assert!(cc.n() < 120 && cc.n() > 40);
        assert_eq!(synthetic_panel_csv(120, 0.03, 1), text);
    }
}
