//! Result tables (Markdown and CSV) and a static SVG trend plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::ilm::IlmReport;
use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub dev_ppl: f64,
    pub test_wer: f64,
    pub test_ter: f64,
}

/// General-domain test scores of a trained system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    pub wer: f64,
    pub ter: f64,
}

/// Target-domain WER of one system, per adaptation domain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptRow {
    pub system: String,
    pub wer: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub domain: String,
    pub alpha: f64,
    pub baseline_general_ppl: f64,
    pub adapted_general_ppl: f64,
    /// After adapting with alpha = 0.
    pub unregularized_general_ppl: f64,
    pub baseline_target_ppl: f64,
    pub adapted_target_ppl: f64,
    pub general_wer_before: f64,
    pub general_wer_after: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Results {
    pub config_fingerprint: String,
    pub general: String,
    pub domains: Vec<String>,
    pub lambda_sweep: Vec<LambdaRow>,
    pub systems: Vec<SystemRow>,
    pub adaptation: Vec<AdaptRow>,
    pub adaptation_ppl: Vec<PplRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ilm: Option<IlmReport>,
}

impl Results {
    pub fn adaptation_wer(&self, system: &str, domain: &str) -> Option<f64> {
        self.adaptation
            .iter()
            .find(|r| r.system == system)
            .and_then(|r| r.wer.get(domain).copied())
    }

    pub fn lambda_row(&self, lambda: f64) -> Option<&LambdaRow> {
        self.lambda_sweep.iter().find(|r| r.lambda == lambda)
    }

    pub fn system(&self, name: &str) -> Option<&SystemRow> {
        self.systems.iter().find(|r| r.system == name)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn lambda_table(r: &Results) -> (String, String) {
    let mut md = String::from("| lambda | dev PPL | WER (%) | TER (%) |\n|---|---|---|---|\n");
    let mut csv = String::from("lambda,dev_ppl,test_wer,test_ter\n");
    for row in &r.lambda_sweep {
        let _ = writeln!(md, "| {} | {:.3} | {} | {} |", row.lambda, row.dev_ppl, pct(row.test_wer), pct(row.test_ter));
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6}", row.lambda, row.dev_ppl, row.test_wer, row.test_ter);
    }
    (md, csv)
}

fn adaptation_table(r: &Results) -> (String, String) {
    let mut md = String::from("| system |");
    let mut csv = String::from("system");
    for d in &r.domains {
        let _ = write!(md, " {d} |");
        let _ = write!(csv, ",{d}");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(r.domains.len()));
    md.push('\n');
    csv.push('\n');
    for row in &r.adaptation {
        let _ = write!(md, "| {} |", row.system);
        csv.push_str(&row.system);
        for d in &r.domains {
            match row.wer.get(d) {
                Some(w) => {
                    let _ = write!(md, " {} |", pct(*w));
                    let _ = write!(csv, ",{w:.6}");
                }
                None => {
                    md.push_str(" - |");
                    csv.push(',');
                }
            }
        }
        md.push('\n');
        csv.push('\n');
    }
    (md, csv)
}

fn systems_table(r: &Results) -> String {
    let mut md = format!("| system | {} WER (%) | TER (%) |\n|---|---|---|\n", r.general);
    for s in &r.systems {
        let _ = writeln!(md, "| {} | {} | {} |", s.system, pct(s.wer), pct(s.ter));
    }
    md
}

fn ppl_table(r: &Results) -> String {
    let mut md = String::from(
        "| domain | alpha | general PPL before | after | after (alpha 0) | target PPL before | after | general WER before (%) | after (%) |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for p in &r.adaptation_ppl {
        let _ = writeln!(
            md,
            "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} |",
            p.domain,
            p.alpha,
            p.baseline_general_ppl,
            p.adapted_general_ppl,
            p.unregularized_general_ppl,
            p.baseline_target_ppl,
            p.adapted_target_ppl,
            pct(p.general_wer_before),
            pct(p.general_wer_after)
        );
    }
    md
}

/// One panel per series, sharing the lambda axis.
pub fn trend_svg(rows: &[LambdaRow]) -> String {
    let (w, h, pad) = (360.0, 220.0, 40.0);
    let series: [(&str, Vec<f64>); 2] = [
        ("decoder LM dev PPL", rows.iter().map(|r| r.dev_ppl).collect()),
        ("test WER (%)", rows.iter().map(|r| 100.0 * r.test_wer).collect()),
    ];
    let xs: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let (x0, x1) = (0.0f64.min(xs.iter().cloned().fold(f64::INFINITY, f64::min)), xs.iter().cloned().fold(1.0f64, f64::max));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        2.0 * w
    );
    for (k, (title, ys)) in series.iter().enumerate() {
        let ox = k as f64 * w;
        let finite: Vec<f64> = ys.iter().copied().filter(|y| y.is_finite()).collect();
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = 0.1 * (hi - lo);
            (lo - m, hi + m)
        };
        let px = |x: f64| ox + pad + (x - x0) / (x1 - x0).max(1e-9) * (w - 2.0 * pad);
        let py = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{pad}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#888\"/>",
            ox + pad,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"20\">{title}</text>", ox + pad);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\">lambda</text>", ox + w / 2.0 - 15.0, h - 8.0);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\">{hi:.2}</text>", ox + 2.0, pad + 4.0);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\">{lo:.2}</text>", ox + 2.0, h - pad);
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        for (&x, &y) in xs.iter().zip(ys) {
            if y.is_finite() {
                let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f5fa8\"/>", px(x), py(y));
                let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x}</text>", px(x), h - pad + 14.0);
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write every table and plot into `out`. The output depends only on `r`.
pub fn write_report(r: &Results, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).at(out)?;
    let (lambda_md, lambda_csv) = lambda_table(r);
    let (adapt_md, adapt_csv) = adaptation_table(r);
    write_atomic(&out.join("lambda_sweep.csv"), lambda_csv.as_bytes())?;
    write_atomic(&out.join("adaptation.csv"), adapt_csv.as_bytes())?;
    write_atomic(&out.join("lambda_trend.svg"), trend_svg(&r.lambda_sweep).as_bytes())?;

    let mut md = format!("# Results\n\nconfig fingerprint `{}`\n\n", r.config_fingerprint);
    let _ = write!(md, "## WER on the {} test set by lambda\n\n{lambda_md}\n", r.general);
    let _ = write!(md, "## Systems on the {} test set\n\n{}\n", r.general, systems_table(r));
    let _ = write!(md, "## WER (%) on the adaptation test sets\n\n{adapt_md}\n");
    let _ = write!(md, "## Decoder LM after adaptation\n\n{}\n", ppl_table(r));
    if let Some(ilm) = &r.ilm {
        let _ = write!(
            md,
            "## Internal LM check\n\n- constant-acoustics identity: max |diff| {:.3e} over {} probes ({})\n- last-emission frame shared with the best hypothesis: {:.3} (beam {}, {} utterances)\n",
            ilm.identity_max_abs_diff,
            ilm.probes,
            if ilm.identity_pass { "pass" } else { "FAIL" },
            ilm.shared_frame_fraction,
            ilm.beam,
            ilm.decoded
        );
    }
    write_atomic(&out.join("report.md"), md.as_bytes())
}
