//! Plain-table and portable-graymap output for external plotting.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;

use crate::container::write_atomic;
use crate::error::Result;

/// Tab-separated table with a header row.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// 8-bit binary PGM, min-max scaled; the comment line records the scale
/// so values can be mapped back.
pub fn write_pgm(path: &Path, field: ArrayView2<'_, f64>) -> Result<()> {
    let (ny, nx) = field.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(ny * nx + 64);
    let mut header = String::new();
    writeln!(header, "P5").unwrap();
    writeln!(header, "# min {lo} max {hi}").unwrap();
    writeln!(header, "{nx} {ny}").unwrap();
    writeln!(header, "255").unwrap();
    out.extend_from_slice(header.as_bytes());
    // top row of the image is the largest y
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = ((field[[j, i]] - lo) / span * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    write_atomic(path, &out)
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn tsv_and_pgm_write() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("t.tsv");
        write_tsv(&t, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        let text = std::fs::read_to_string(&t).unwrap();
        assert_eq!(text, "a\tb\n1\t2\n");

        let p = dir.path().join("f.pgm");
        let f = Array2::from_shape_fn((3, 4), |(j, i)| (i + j) as f64);
        write_pgm(&p, f.view()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        assert_eq!(bytes.len() - header_end, 12);
    }
}
