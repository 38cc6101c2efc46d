//! Synthetic stand-in for the bank-marketing table.
//!
//! Same columns and value vocabularies as `bank-full.csv`, with the label
//! drawn from a logistic model whose intercept is calibrated to the target
//! positive rate. Used when the real file is not available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

pub const BANK_POSITIVE_RATE: f64 = 0.117;

const JOBS: [&str; 12] = [
    "admin.", "blue-collar", "entrepreneur", "housemaid", "management", "retired", "self-employed", "services",
    "student", "technician", "unemployed", "unknown",
];
const JOB_WEIGHTS: [f64; 12] = [11.4, 21.5, 3.3, 2.7, 20.9, 5.0, 3.5, 9.2, 2.1, 16.8, 2.9, 0.7];
const MONTHS: [&str; 12] = ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"];
const MONTH_WEIGHTS: [f64; 12] = [3.1, 5.9, 1.1, 6.5, 30.4, 11.8, 15.3, 13.8, 1.3, 1.6, 8.8, 0.5];
const MONTH_EFFECT: [f64; 12] = [-0.6, 0.1, 1.4, 0.3, -0.5, 0.0, -0.2, 0.0, 1.3, 1.2, -0.1, 1.2];

pub const BANK_SCHEMA: &str = r#"age = "numeric"
job = "categorical"
marital = "categorical"
education = "categorical"
default = "categorical"
balance = "numeric"
housing = "categorical"
loan = "categorical"
contact = "categorical"
day = "numeric"
month = "categorical"
duration = "numeric"
campaign = "numeric"
pdays = "numeric"
previous = "numeric"
poutcome = "categorical"
y = "label"
"#;

const HEADER: &str = "age,job,marital,education,default,balance,housing,loan,contact,day,month,duration,campaign,pdays,previous,poutcome,y";

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str], weights: &[f64]) -> (usize, &'a str) {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return (i, items[i]);
        }
        u -= w;
    }
    (items.len() - 1, items[items.len() - 1])
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Row {
    cells: Vec<String>,
    score: f64,
}

fn draw_row(rng: &mut ChaCha8Rng) -> Row {
    let age = Normal::new(41.0_f64, 10.5).unwrap().sample(rng).clamp(18.0, 95.0).round();
    let (job_i, job) = pick(rng, &JOBS, &JOB_WEIGHTS);
    let (_, marital) = pick(rng, &["married", "single", "divorced"], &[60.0, 28.0, 12.0]);
    let (_, education) = pick(rng, &["secondary", "tertiary", "primary", "unknown"], &[51.0, 29.0, 15.0, 5.0]);
    let (_, default) = pick(rng, &["no", "yes"], &[98.2, 1.8]);
    let balance = (LogNormal::new(6.5_f64, 1.4).unwrap().sample(rng) - 400.0).round();
    let (housing_i, housing) = pick(rng, &["yes", "no"], &[55.6, 44.4]);
    let (loan_i, loan) = pick(rng, &["no", "yes"], &[84.0, 16.0]);
    let (contact_i, contact) = pick(rng, &["cellular", "unknown", "telephone"], &[64.8, 28.8, 6.4]);
    let day = rng.random_range(1..=31);
    let (month_i, month) = pick(rng, &MONTHS, &MONTH_WEIGHTS);
    let duration = LogNormal::new(5.2_f64, 0.8).unwrap().sample(rng).round().max(1.0);
    let campaign = 1.0 + Poisson::new(1.7).unwrap().sample(rng);
    let contacted_before = rng.random::<f64>() < 0.18;
    let (pdays, previous, poutcome_i, poutcome) = if contacted_before {
        let pdays = rng.random_range(1..=400) as f64;
        let previous = 1.0 + Poisson::new(1.5).unwrap().sample(rng);
        let (i, p) = pick(rng, &["failure", "other", "success"], &[60.0, 22.0, 18.0]);
        (pdays, previous, i, p)
    } else {
        (-1.0, 0.0, 3, "unknown")
    };

    let mut z = 1.55 * (duration / 180.0).ln();
    z += 0.9 * (duration > 600.0) as u8 as f64;
    z += [-0.2, 0.0, 2.3, 0.0][poutcome_i];
    z += MONTH_EFFECT[month_i];
    z += -0.65 * (housing_i == 0) as u8 as f64 - 0.45 * (loan_i == 1) as u8 as f64;
    z += [0.0, -1.1, 0.1][contact_i];
    z += -0.12 * (campaign - 1.0);
    z += match JOBS[job_i] {
        "student" | "retired" => 0.55,
        "blue-collar" => -0.3,
        _ => 0.0,
    };
    // Older and very young customers respond more.
    z += 0.018 * (age - 42.0).abs() - 0.1;
    z += 0.25 * (balance > 1500.0) as u8 as f64;

    let cells = vec![
        format!("{age}"),
        job.into(),
        marital.into(),
        education.into(),
        default.into(),
        format!("{balance}"),
        housing.into(),
        loan.into(),
        contact.into(),
        format!("{day}"),
        month.into(),
        format!("{duration}"),
        format!("{campaign}"),
        format!("{pdays}"),
        format!("{previous}"),
        poutcome.into(),
    ];
    Row { cells, score: z }
}

/// Intercept giving mean `sigmoid(score + b) = rate`.
fn calibrate(scores: &[f64], rate: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let mean = scores.iter().map(|s| sigmoid(s + mid)).sum::<f64>() / scores.len() as f64;
        if mean < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// CSV text with header; labels are "yes" / "no".
pub fn bank_surrogate_csv(n_rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Row> = (0..n_rows).map(|_| draw_row(&mut rng)).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let b = calibrate(&scores, BANK_POSITIVE_RATE);
    let mut out = String::with_capacity(n_rows * 96);
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        let y = rng.random::<f64>() < sigmoid(r.score + b);
        out.push_str(&r.cells.join(","));
        out.push_str(if y { ",yes\n" } else { ",no\n" });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_rate_matches_target() {
        let csv = bank_surrogate_csv(20_000, 3);
        let yes = csv.lines().skip(1).filter(|l| l.ends_with(",yes")).count();
        let rate = yes as f64 / 20_000.0;
        assert!((rate - BANK_POSITIVE_RATE).abs() < 0.015, "rate {rate}");
    }

    #[test]
    fn schema_covers_header() {
        let schema: std::collections::BTreeMap<String, String> = toml::from_str(BANK_SCHEMA).unwrap();
        let cols: Vec<&str> = HEADER.split(',').collect();
        assert_eq!(schema.len(), cols.len());
        assert!(cols.iter().all(|c| schema.contains_key(*c)));
    }

    #[test]
    fn seeded() {
        assert_eq!(bank_surrogate_csv(50, 9), bank_surrogate_csv(50, 9));
        assert_ne!(bank_surrogate_csv(50, 9), bank_surrogate_csv(50, 10));
    }
}
