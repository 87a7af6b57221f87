//! Kaplan-Meier report for predicted risk groups.

use std::fmt::Write as _;
use std::path::Path;

use higine::pipeline::{read_predictions, RUN_MANIFEST_FILE};
use higine::survival_metrics::{cox_binary_hr, km_curve, logrank, KmStep, MetricsError};
use serde_json::json;

use crate::error::CliError;
use crate::manifest::{write_json, RunManifest};

pub const KM_CSV: &str = "km.csv";
pub const KM_JSON: &str = "km.json";
pub const KM_SVG: &str = "km.svg";

fn curve_csv(curves: &[(u8, Vec<KmStep>)]) -> String {
    let mut out = String::from("group,time,survival,at_risk,events,censored\n");
    for (g, steps) in curves {
        for s in steps {
            let _ = writeln!(out, "{g},{},{},{},{},{}", s.time, s.survival, s.at_risk, s.events, s.censored);
        }
    }
    out
}

/// Step-function plot of both curves with censoring ticks.
fn curve_svg(curves: &[(u8, Vec<KmStep>)], t_max: f64) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let x = |t: f64| pad + (w - 2.0 * pad) * t / t_max.max(1e-12);
    let y = |s: f64| h - pad - (h - 2.0 * pad) * s;
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(
        out,
        "<path d=\"M{pad} {pad} L{pad} {} L{} {}\" fill=\"none\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">days</text>", w / 2.0, h - 12.0);
    let _ = writeln!(out, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">survival</text>", h / 2.0, h / 2.0);
    for (g, steps) in curves {
        let (colour, name) = if *g == 1 { ("#c0392b", "predicted short") } else { ("#2471a3", "predicted long") };
        let mut d = format!("M{} {}", x(0.0), y(1.0));
        let mut prev = 1.0;
        let mut ticks = String::new();
        for s in steps {
            let _ = write!(d, " L{:.2} {:.2} L{:.2} {:.2}", x(s.time), y(prev), x(s.time), y(s.survival));
            if s.censored > 0 {
                let _ = write!(ticks, "M{:.2} {:.2} l0 -6 ", x(s.time), y(s.survival) + 3.0);
            }
            prev = s.survival;
        }
        let _ = write!(d, " L{:.2} {:.2}", x(t_max), y(prev));
        let _ = writeln!(out, "<path d=\"{d}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>");
        if !ticks.is_empty() {
            let _ = writeln!(out, "<path d=\"{ticks}\" stroke=\"{colour}\"/>");
        }
        let ly = pad + 16.0 * (*g as f64 + 1.0);
        let _ = writeln!(out, "<text x=\"{}\" y=\"{ly}\" fill=\"{colour}\">{name}</text>", w - pad - 110.0);
    }
    out.push_str("</svg>\n");
    out
}

fn failure<T>(r: &Result<T, MetricsError>) -> Option<String> {
    r.as_ref().err().map(|e| e.to_string())
}

pub fn run(predictions: &Path, threshold: f64, out: &Path, svg: bool) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Config(format!("--threshold must lie in [0, 1], got {threshold}")));
    }
    let rows = read_predictions(predictions)?;
    let mut m = RunManifest::new("km");
    m.clinical_file = Some(predictions.display().to_string());
    m.n_patients = Some(rows.len());
    m.write(out)?;

    let time: Vec<f64> = rows.iter().map(|r| r.follow_up_days).collect();
    let event: Vec<bool> = rows.iter().map(|r| r.event).collect();
    let group: Vec<bool> = rows.iter().map(|r| r.prob_short >= threshold).collect();
    let n1 = group.iter().filter(|&&g| g).count();

    let mut curves = Vec::new();
    for g in [0u8, 1] {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| group[i] == (g == 1)).collect();
        if idx.is_empty() {
            continue;
        }
        let t: Vec<f64> = idx.iter().map(|&i| time[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| event[i]).collect();
        curves.push((g, km_curve(&t, &e)?));
    }
    let csv_path = out.join(KM_CSV);
    std::fs::write(&csv_path, curve_csv(&curves)).map_err(|e| CliError::io(&csv_path, e))?;
    if svg {
        let t_max = time.iter().copied().fold(0.0, f64::max);
        let svg_path = out.join(KM_SVG);
        std::fs::write(&svg_path, curve_svg(&curves, t_max)).map_err(|e| CliError::io(&svg_path, e))?;
    }

    let lr = logrank(&time, &event, &group);
    let cox = cox_binary_hr(&time, &event, &group);
    let doc = json!({
        "run_manifest": RUN_MANIFEST_FILE,
        "threshold": threshold,
        "group_coding": {"1": "prob_short >= threshold", "0": "prob_short < threshold"},
        "n": {"0": rows.len() - n1, "1": n1},
        "events": {
            "0": (0..rows.len()).filter(|&i| !group[i] && event[i]).count(),
            "1": (0..rows.len()).filter(|&i| group[i] && event[i]).count(),
        },
        "logrank": lr.as_ref().ok().map(|r| json!({"chi2": r.chi2, "p_value": r.p_value, "observed_group1": r.observed_group1, "expected_group1": r.expected_group1})),
        "cox": cox.as_ref().ok().map(|c| json!({"beta": c.beta, "hazard_ratio": c.hazard_ratio, "se": c.se, "iterations": c.iterations})),
        "errors": {"logrank": failure(&lr), "cox": failure(&cox)},
    });
    write_json(&out.join(KM_JSON), &doc)?;

    match (&lr, &cox) {
        (Ok(l), Ok(c)) => {
            println!("log-rank chi2 {:.3} p {:.3e}; HR {:.3} (short vs long)", l.chi2, l.p_value, c.hazard_ratio);
            Ok(())
        }
        // Curves and whatever statistics exist are on disk; the exit code
        // still reports the failure.
        (Err(e), _) | (_, Err(e)) => Err(e.clone().into()),
    }
}
