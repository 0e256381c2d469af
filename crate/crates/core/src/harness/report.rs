//! Comparison tables and charts over [`EvalReport`]s.

use std::collections::BTreeSet;
use std::fmt::Write;

use super::train::EvalReport;

const COLUMNS: [&str; 7] = [
    "variant",
    "held_out",
    "seed",
    "held_out_acc",
    "macro_f1",
    "style_gap",
    "params",
];

fn row(r: &EvalReport) -> [String; 7] {
    [
        r.variant.to_string(),
        r.held_out_domain.clone(),
        r.seed.to_string(),
        format!("{:.4}", r.held_out_accuracy),
        format!("{:.4}", r.macro_f1),
        format!("{:.4}", r.feature_style_gap),
        r.params_total.to_string(),
    ]
}

/// Fixed-width text table, one row per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 7]> = reports.iter().map(row).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([COLUMNS[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&COLUMNS, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(
        &rule.iter().map(String::as_str).collect::<Vec<_>>(),
        &mut out,
    );
    for r in &rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    out
}

/// Same rows as [`comparison_table`] as CSV with a header.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).expect("in-memory write");
    for r in reports {
        w.write_record(row(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bar chart of per-domain accuracy, one bar per report inside each
/// domain group. Held-out bars are drawn solid, training-domain bars faded.
pub fn accuracy_svg(reports: &[EvalReport]) -> String {
    let domains: Vec<String> = reports
        .iter()
        .flat_map(|r| r.per_domain_accuracy.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let bar = 14.0;
    let group = bar * reports.len().max(1) as f64 + 20.0;
    let (left, top, plot_h) = (50.0, 20.0, 200.0);
    let legend_h = 16.0 * reports.len() as f64;
    let width = left + group * domains.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 40.0 + legend_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            width - 10.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (di, d) in domains.iter().enumerate() {
        let gx = left + 10.0 + group * di as f64;
        for (ri, r) in reports.iter().enumerate() {
            let Some(&acc) = r.per_domain_accuracy.get(d) else {
                continue;
            };
            let h = plot_h * acc.clamp(0.0, 1.0);
            let opacity = if &r.held_out_domain == d { 1.0 } else { 0.35 };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{h}" fill="{}" fill-opacity="{opacity}"/>"#,
                gx + bar * ri as f64,
                top + plot_h - h,
                bar - 2.0,
                PALETTE[ri % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            gx + bar * reports.len() as f64 / 2.0,
            top + plot_h + 16.0,
            escape(d)
        );
    }
    for (ri, r) in reports.iter().enumerate() {
        let y = top + plot_h + 36.0 + 16.0 * ri as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{} held out {} seed {}</text>"#,
            y - 9.0,
            PALETTE[ri % PALETTE.len()],
            left + 14.0,
            y,
            r.variant,
            escape(&r.held_out_domain),
            r.seed
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Variant;

    fn report(variant: Variant, acc: f64) -> EvalReport {
        EvalReport {
            variant,
            held_out_domain: "dim".into(),
            seed: 1,
            per_domain_accuracy: [("dim".to_string(), acc), ("warm".to_string(), 0.9)].into(),
            held_out_accuracy: acc,
            macro_f1: acc - 0.1,
            feature_style_gap: 0.25,
            params_total: 100,
        }
    }

    #[test]
    fn two_reports_two_rows() {
        let reps = [
            report(Variant::Baseline, 0.5),
            report(Variant::InvNorm, 0.75),
        ];
        let table = comparison_table(&reps);
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(3).unwrap().starts_with("invnorm"));
        let csv = comparison_csv(&reps);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), COLUMNS.join(","));
        assert!(csv.contains("baseline,dim,1,0.5000,0.4000,0.2500,100"));
    }

    #[test]
    fn svg_has_one_bar_per_report_and_domain() {
        let reps = [
            report(Variant::Baseline, 0.5),
            report(Variant::InvNorm, 0.75),
        ];
        let svg = accuracy_svg(&reps);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        // 4 bars + 2 legend swatches
        assert_eq!(svg.matches("<rect").count(), 6);
    }
}
