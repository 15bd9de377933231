//! Minimal SVG emission for coverage bars, delta-sweep curves, and
//! validity-region heatmaps.

use std::fmt::Write as _;

use conformal_pi::weights::CellVerdict;

use crate::experiment::AggregateRow;
use crate::sweep::{DeltaSweepOutput, RegionOutput};

const W: f64 = 720.0;
const H: f64 = 440.0;
const MARGIN: f64 = 60.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    )
}

/// Coverage bars with standard-error whiskers and the nominal reference
/// line.
pub fn coverage_bars(title: &str, rows: &[AggregateRow], nominal: f64) -> String {
    let mut s = header(title);
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let y_of = |v: f64| MARGIN + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let n = rows.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;

    for g in 0..=10 {
        let v = g as f64 / 10.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            "<line x1=\"{MARGIN}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#eee\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            W - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    for (i, row) in rows.iter().enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.2);
        let y = y_of(row.coverage_mean);
        let h = y_of(0.0) - y;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" \
             fill=\"#4878cf\" opacity=\"0.85\"/>"
        );
        let cx = x + bar_w / 2.0;
        let ylo = y_of(row.coverage_mean - row.coverage_se);
        let yhi = y_of(row.coverage_mean + row.coverage_se);
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" y1=\"{ylo:.1}\" x2=\"{cx:.1}\" y2=\"{yhi:.1}\" \
             stroke=\"black\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
             transform=\"rotate(-30 {cx:.1} {:.1})\">{}</text>",
            H - MARGIN + 26.0,
            H - MARGIN + 26.0,
            row.method
        );
    }
    let yn = y_of(nominal);
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{yn:.1}\" x2=\"{:.1}\" y2=\"{yn:.1}\" \
         stroke=\"red\" stroke-dasharray=\"6,4\"/>\
         <text x=\"{:.1}\" y=\"{:.1}\" fill=\"red\">{nominal:.2}</text>",
        W - MARGIN,
        W - MARGIN + 4.0,
        yn + 4.0
    );
    s.push_str("</svg>\n");
    s
}

/// Delta-sweep coverage curve with the constant-error validity interval
/// endpoints (0 and the negated mean weight scale) drawn as dashed
/// verticals.
pub fn delta_sweep_plot(title: &str, out: &DeltaSweepOutput, nominal: f64) -> String {
    let mut s = header(title);
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let deltas: Vec<f64> = out.aggregates_per_delta.iter().map(|(d, _)| *d).collect();
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min).min(-out.mean_weight_scale) - 0.2;
    let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0) + 0.2;
    let x_of = |d: f64| MARGIN + plot_w * (d - lo) / (hi - lo);
    let y_of = |v: f64| MARGIN + plot_h * (1.0 - v.clamp(0.0, 1.0));

    // shaded valid interval for the undercoverage regime
    let x0 = x_of(-out.mean_weight_scale);
    let x1 = x_of(0.0);
    let _ = writeln!(
        s,
        "<rect x=\"{x0:.1}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{plot_h:.1}\" \
         fill=\"#d9f2d9\"/>",
        (x1 - x0).max(0.0)
    );
    for &(x, label) in &[(x1, "0"), (x0, "-W/(n+1)")] {
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{MARGIN}\" x2=\"{x:.1}\" y2=\"{:.1}\" \
             stroke=\"green\" stroke-dasharray=\"5,4\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"green\">{label}</text>",
            H - MARGIN,
            H - MARGIN + 16.0
        );
    }
    let yn = y_of(nominal);
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{yn:.1}\" x2=\"{:.1}\" y2=\"{yn:.1}\" \
         stroke=\"red\" stroke-dasharray=\"6,4\"/>",
        W - MARGIN
    );
    let mut path = String::new();
    let mut sorted: Vec<&(f64, AggregateRow)> = out.aggregates_per_delta.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (k, (d, a)) in sorted.iter().enumerate() {
        let cmd = if k == 0 { 'M' } else { 'L' };
        let _ = write!(path, "{cmd}{:.1},{:.1} ", x_of(*d), y_of(a.coverage_mean));
    }
    let _ = writeln!(
        s,
        "<path d=\"{path}\" fill=\"none\" stroke=\"#4878cf\" stroke-width=\"2\"/>"
    );
    for (d, a) in &out.aggregates_per_delta {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#4878cf\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{d:.2}</text>",
            x_of(*d),
            y_of(a.coverage_mean),
            x_of(*d),
            H - MARGIN + 30.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Region heatmap: theory verdict per cell with the requirement
/// boundaries overlaid as dashed polylines.
pub fn region_heatmap(title: &str, out: &RegionOutput) -> String {
    let mut s = header(title);
    let rows = out.delta_min_values.len();
    let cols = out.delta_max_values.len();
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let cw = plot_w / cols as f64;
    let ch = plot_h / rows as f64;

    for cell in &out.cells {
        let x = MARGIN + cell.col as f64 * cw;
        // row 0 (smallest delta_min) at the bottom
        let y = MARGIN + (rows - 1 - cell.row) as f64 * ch;
        let color = match cell.theory {
            CellVerdict::Valid => "#7fbf7f",
            CellVerdict::Invalid => "#f2a65e",
            CellVerdict::Boundary => "#cccccc",
            CellVerdict::Undefined => "#f7f7f7",
        };
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw:.2}\" height=\"{ch:.2}\" \
             fill=\"{color}\" stroke=\"white\" stroke-width=\"0.5\"/>"
        );
    }

    let dmin_lo = out.delta_min_values[0];
    let dmin_hi = *out.delta_min_values.last().unwrap();
    let dmax_lo = out.delta_max_values[0];
    let dmax_hi = *out.delta_max_values.last().unwrap();
    let x_of = |dmax: f64| MARGIN + plot_w * (dmax - dmax_lo) / (dmax_hi - dmax_lo);
    let y_of = |dmin: f64| MARGIN + plot_h * (1.0 - (dmin - dmin_lo) / (dmin_hi - dmin_lo));

    // requirement-2 boundary: delta_min*(delta_max)
    let mut path = String::new();
    let mut started = false;
    for k in 0..=60 {
        let dmax = dmax_lo + (dmax_hi - dmax_lo) * k as f64 / 60.0;
        let dmin = out.boundary.delta_min_star(dmax);
        if dmin < dmin_lo || dmin > dmin_hi {
            continue;
        }
        let cmd = if started { 'L' } else { 'M' };
        started = true;
        let _ = write!(path, "{cmd}{:.1},{:.1} ", x_of(dmax), y_of(dmin));
    }
    if started {
        let _ = writeln!(
            s,
            "<path d=\"{path}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" \
             stroke-dasharray=\"7,5\"/>"
        );
    }
    // requirement-1 boundary: delta_max*(delta_min)
    let mut path = String::new();
    let mut started = false;
    for k in 0..=60 {
        let dmin = dmin_lo + (dmin_hi - dmin_lo) * k as f64 / 60.0;
        if let Some(dmax) = out.boundary.delta_max_star(dmin) {
            if dmax < dmax_lo || dmax > dmax_hi {
                continue;
            }
            let cmd = if started { 'L' } else { 'M' };
            started = true;
            let _ = write!(path, "{cmd}{:.1},{:.1} ", x_of(dmax), y_of(dmin));
        }
    }
    if started {
        let _ = writeln!(
            s,
            "<path d=\"{path}\" fill=\"none\" stroke=\"#333\" stroke-width=\"1.5\" \
             stroke-dasharray=\"3,4\"/>"
        );
    }

    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">delta_max</text>\
         <text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">delta_min</text>",
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    );
    for (label, color, x) in [
        ("valid", "#7fbf7f", MARGIN),
        ("invalid", "#f2a65e", MARGIN + 90.0),
        ("boundary", "#cccccc", MARGIN + 190.0),
        ("undefined", "#f7f7f7", MARGIN + 300.0),
    ] {
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\" \
             stroke=\"#999\"/><text x=\"{:.1}\" y=\"{:.1}\">{label}</text>",
            H - 26.0,
            x + 16.0,
            H - 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}
