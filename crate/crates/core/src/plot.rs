//! Stacked-variable SVG: the original series in black, substituted
//! segments of the counterfactual in red underneath.

use std::fmt::Write as _;

use crate::search::{SearchError, SubstitutionSet};
use crate::series::MultivariateSeries;

const WIDTH: f64 = 1000.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 20.0;
const HEADER: f64 = 40.0;
const ROW_HEIGHT: f64 = 100.0;
const PAD_FRACTION: f64 = 0.05;

/// Header text of an overlay plot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayLabels {
    pub original_pred: String,
    pub target: String,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_overlay(
    original: &MultivariateSeries,
    counterfactual: &MultivariateSeries,
    subs: &SubstitutionSet,
    labels: &OverlayLabels,
) -> Result<String, SearchError> {
    if original.shape() != counterfactual.shape() {
        return Err(SearchError::Substitution(format!(
            "cannot overlay shape {:?} on {:?}",
            counterfactual.shape(),
            original.shape()
        )));
    }
    let (v, t) = (original.num_variables(), original.timesteps());
    subs.validate(v, t)?;

    let (lo, hi) = original
        .as_flat()
        .iter()
        .chain(counterfactual.as_flat())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = hi - lo;
    let pad = if span > 0.0 { span * PAD_FRACTION } else { 0.5 };
    let (lo, hi) = (lo - pad, hi + pad);

    let height = HEADER + ROW_HEIGHT * v as f64;
    let plot_w = WIDTH - LEFT - RIGHT;
    let step = plot_w / (t.max(2) - 1) as f64;
    let x = |i: usize| LEFT + i as f64 * step;
    let y = |row: usize, value: f64| {
        HEADER + row as f64 * ROW_HEIGHT + (hi - value) / (hi - lo) * ROW_HEIGHT
    };
    let points = |row: usize, values: &[f64], from: usize| {
        let mut s = String::new();
        for (i, &val) in values.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", x(from + i), y(row, val));
        }
        s
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH:.0} {height:.0}" width="{WIDTH:.0}" height="{height:.0}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text class="header" x="{LEFT:.0}" y="25" font-family="sans-serif" font-size="16">original prediction: {} | counterfactual target: {}</text>"#,
        escape(&labels.original_pred),
        escape(&labels.target)
    );
    for row in 0..v {
        let name = escape(&original.variables()[row]);
        let top = HEADER + row as f64 * ROW_HEIGHT;
        let _ = writeln!(
            svg,
            r#"<g class="row" data-row="{row}" data-variable="{name}">"#
        );
        let _ = writeln!(
            svg,
            r#"<text class="label" x="10" y="{:.2}" font-family="sans-serif" font-size="14">{name}</text>"#,
            top + ROW_HEIGHT / 2.0
        );
        for atom in subs.atoms().iter().filter(|a| a.variable == row) {
            let (t0, t1) = atom.window.unwrap_or((0, t));
            let _ = writeln!(
                svg,
                r#"<polyline class="counterfactual" fill="none" stroke="red" stroke-width="1.5" points="{}"/>"#,
                points(row, &counterfactual.row(row)[t0..t1], t0)
            );
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="original" fill="none" stroke="black" stroke-width="1" points="{}"/>"#,
            points(row, original.row(row), 0)
        );
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
