//! Static SVG charts. Coordinates are printed with fixed precision so the same
//! data always yields the same bytes.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n\
         <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        W / 2.0,
        H - 10.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN,
    );
}

fn axis_ticks(out: &mut String, x: (f64, f64), y: (f64, f64)) {
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let px = MARGIN + f * (W - 2.0 * MARGIN);
        let py = H - MARGIN - f * (H - 2.0 * MARGIN);
        let _ = writeln!(
            out,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{:.2}</text>",
            H - MARGIN + 14.0,
            x.0 + f * (x.1 - x.0)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{:.2}</text>",
            MARGIN - 4.0,
            py + 3.0,
            y.0 + f * (y.1 - y.0)
        );
    }
}

fn map(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi > lo {
        out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
    } else {
        (out_lo + out_hi) / 2.0
    }
}

/// Polyline chart over fixed axis ranges.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> String {
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    axis_ticks(&mut out, x_range, y_range);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    map(x, x_range.0, x_range.1, MARGIN, W - MARGIN),
                    map(y, y_range.0, y_range.1, H - MARGIN, MARGIN)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">{}</text>",
            MARGIN + 6.0,
            MARGIN + 12.0 + 12.0 * i as f64,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Overlaid 50-bin histograms of ID and OOD scores on [-1, 1].
pub fn score_histogram(title: &str, id: &[f64], ood: &[f64]) -> String {
    const BINS: usize = 50;
    let count = |xs: &[f64]| {
        let mut c = [0usize; BINS];
        for &x in xs {
            let b = (((x + 1.0) / 2.0) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64);
            c[b as usize] += 1;
        }
        c
    };
    let (ci, co) = (count(id), count(ood));
    let norm = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let peak = (0..BINS)
        .map(|b| norm(ci[b], id.len()).max(norm(co[b], ood.len())))
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut out = String::new();
    header(&mut out, title, "cosine score", "fraction of samples");
    axis_ticks(&mut out, (-1.0, 1.0), (0.0, peak));
    let bw = (W - 2.0 * MARGIN) / BINS as f64;
    for (counts, n, color, name, row) in [(ci, id.len(), COLORS[0], "ID", 0), (co, ood.len(), COLORS[1], "OOD", 1)] {
        for (b, &c) in counts.iter().enumerate() {
            let h = norm(c, n) / peak * (H - 2.0 * MARGIN);
            if h > 0.0 {
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{h:.2}\" fill=\"{color}\" fill-opacity=\"0.5\"/>",
                    MARGIN + b as f64 * bw,
                    H - MARGIN - h
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">{name}</text>",
            MARGIN + 6.0,
            MARGIN + 12.0 + 12.0 * row as f64
        );
    }
    out.push_str("</svg>\n");
    out
}
