//! Minimal self-contained SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write;

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"8\" y=\"16\" font-size=\"13\">{}</text>\n",
        escape(title)
    )
}

/// Rows (apps) by columns (nodes), cell shade proportional to the value.
pub fn heatmap(title: &str, m: &BTreeMap<String, BTreeMap<usize, u32>>, nodes: &[usize]) -> String {
    let (cw, ch, left, top) = (48.0, 22.0, 110.0, 40.0);
    let w = left + cw * nodes.len().max(1) as f64 + 10.0;
    let h = top + ch * m.len().max(1) as f64 + 10.0;
    let max = m.values().flat_map(|r| r.values()).copied().max().unwrap_or(0).max(1) as f64;
    let mut s = open(w, h, title);
    for (j, n) in nodes.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">node{n}</text>", left + cw * (j as f64 + 0.5), top - 6.0);
    }
    for (i, (app, row)) in m.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", left - 6.0, y + ch * 0.7, escape(app));
        for (j, n) in nodes.iter().enumerate() {
            let v = row.get(n).copied().unwrap_or(0);
            let shade = 255 - (200.0 * v as f64 / max) as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v}</text>",
                left + cw * j as f64,
                left + cw * (j as f64 + 0.5),
                y + ch * 0.7
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per node, stacked by app.
pub fn stacked_bars(title: &str, by_node: &BTreeMap<usize, BTreeMap<String, u64>>) -> String {
    let (bw, gap, left, top, plot_h) = (36.0, 14.0, 50.0, 30.0, 220.0);
    let apps: Vec<&String> = {
        let mut v: Vec<&String> = by_node.values().flat_map(|m| m.keys()).collect();
        v.sort();
        v.dedup();
        v
    };
    let max = by_node.values().map(|m| m.values().sum::<u64>()).max().unwrap_or(0).max(1) as f64;
    let w = left + (bw + gap) * by_node.len().max(1) as f64 + 140.0;
    let h = top + plot_h + 40.0;
    let mut s = open(w, h, title);
    for (j, (node, m)) in by_node.iter().enumerate() {
        let x = left + (bw + gap) * j as f64;
        let mut y = top + plot_h;
        for (k, app) in apps.iter().enumerate() {
            let v = m.get(*app).copied().unwrap_or(0) as f64;
            let bh = plot_h * v / max;
            y -= bh;
            if bh > 0.0 {
                let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{bw}\" height=\"{bh}\" fill=\"{}\"/>", PALETTE[k % PALETTE.len()]);
            }
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">node{node}</text>", x + bw / 2.0, top + plot_h + 14.0);
    }
    let lx = left + (bw + gap) * by_node.len().max(1) as f64 + 10.0;
    for (k, app) in apps.iter().enumerate() {
        let y = top + 14.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{lx}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            PALETTE[k % PALETTE.len()],
            lx + 14.0,
            y + 9.0,
            escape(app)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Pairwise scatter plots of every column pair, histograms on the diagonal.
pub fn scatter_grid(title: &str, columns: &[&str], rows: &[Vec<f64>]) -> String {
    let k = columns.len();
    let (cell, pad, top) = (110.0, 8.0, 30.0);
    let size = cell * k as f64 + 20.0;
    let mut s = open(size, size + top, title);
    let ranges: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) }
        })
        .collect();
    let scale = |v: f64, (lo, hi): (f64, f64)| (v - lo) / (hi - lo);
    for i in 0..k {
        for j in 0..k {
            let (x0, y0) = (10.0 + cell * j as f64, top + cell * i as f64);
            let _ = writeln!(s, "<rect x=\"{x0}\" y=\"{y0}\" width=\"{cell}\" height=\"{cell}\" fill=\"none\" stroke=\"#ccc\"/>");
            let inner = cell - 2.0 * pad;
            if i == j {
                let mut bins = [0usize; 10];
                for r in rows {
                    let b = ((scale(r[j], ranges[j]) * 10.0) as usize).min(9);
                    bins[b] += 1;
                }
                let top_bin = bins.iter().copied().max().unwrap_or(0).max(1) as f64;
                for (b, c) in bins.iter().enumerate() {
                    let bh = inner * *c as f64 / top_bin;
                    let _ = writeln!(
                        s,
                        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{bh}\" fill=\"#4e79a7\"/>",
                        x0 + pad + inner * b as f64 / 10.0,
                        y0 + pad + inner - bh,
                        inner / 10.0
                    );
                }
                let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", x0 + 4.0, y0 + 12.0, escape(columns[j]));
            } else {
                for r in rows {
                    let _ = writeln!(
                        s,
                        "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.5\" fill=\"#e15759\" fill-opacity=\"0.4\"/>",
                        x0 + pad + inner * scale(r[j], ranges[j]),
                        y0 + pad + inner * (1.0 - scale(r[i], ranges[i]))
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
