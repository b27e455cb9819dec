//! Text rendering shared by every file the crate writes.

use ndarray::Array2;

/// 17 significant digits, enough for a lossless `f64` round trip.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// CSV with header `x_1,...,x_D` and one row per sample.
pub fn matrix_to_csv(x: &Array2<f64>) -> String {
    let dim = x.ncols();
    let header: Vec<String> = (1..=dim).map(|d| format!("x_{d}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in x.rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
