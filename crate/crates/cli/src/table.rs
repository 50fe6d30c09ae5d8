use std::fmt::Write;

/// Column-aligned text, or tab-separated values when `tsv` is set.
/// Columns listed in `right` are right-aligned.
pub fn render(header: &[&str], rows: &[Vec<String>], right: &[usize], tsv: bool) -> String {
    let mut out = String::new();
    if tsv {
        out.push_str(&header.join("\t"));
        out.push('\n');
        for row in rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        return out;
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut parts = Vec::new();
        for (i, cell) in cells.enumerate() {
            let w = widths[i];
            parts.push(if right.contains(&i) { format!("{cell:>w$}") } else { format!("{cell:<w$}") });
        }
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

pub fn percent(share: f64) -> String {
    format!("{:.1}%", share * 100.0)
}
