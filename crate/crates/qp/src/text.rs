//! Plain-text serialization of [`QpProblem`].
//!
//! One record per line:
//!
//! ```text
//! qp <num_vars> <num_eq>
//! var <name> <lower> <upper> <linear>
//! const <value>
//! p <row> <col> <value>
//! a <row> <col> <value>
//! b <row> <value>
//! ```
//!
//! Floats are written in shortest round-trip form, so parsing the output
//! reproduces the problem bit for bit. Variable names must not contain
//! whitespace.

use std::fmt::Write as _;

use crate::sparse::SparseMatrix;
use crate::{QpError, QpProblem};

pub fn write_qp(qp: &QpProblem) -> Result<String, QpError> {
    qp.check_dimensions()?;
    let mut s = String::new();
    let _ = writeln!(s, "qp {} {}", qp.num_vars(), qp.num_eq());
    for j in 0..qp.num_vars() {
        let name = &qp.names[j];
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(QpError::Parse(format!("variable name {name:?} is not a single token")));
        }
        let _ = writeln!(s, "var {} {:?} {:?} {:?}", name, qp.lower[j], qp.upper[j], qp.q[j]);
    }
    let _ = writeln!(s, "const {:?}", qp.constant);
    for &(i, j, v) in &qp.p.entries {
        let _ = writeln!(s, "p {i} {j} {v:?}");
    }
    for &(i, j, v) in &qp.a.entries {
        let _ = writeln!(s, "a {i} {j} {v:?}");
    }
    for (i, v) in qp.b.iter().enumerate() {
        let _ = writeln!(s, "b {i} {v:?}");
    }
    Ok(s)
}

pub fn parse_qp(text: &str) -> Result<QpProblem, QpError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    });
    let err = |ln: usize, msg: &str| QpError::Parse(format!("line {}: {msg}", ln + 1));

    let (ln, head) = lines.next().ok_or_else(|| QpError::Parse("empty input".into()))?;
    let h: Vec<&str> = head.split_whitespace().collect();
    if h.len() != 3 || h[0] != "qp" {
        return Err(err(ln, "expected `qp <n> <m>`"));
    }
    let n: usize = h[1].parse().map_err(|_| err(ln, "bad variable count"))?;
    let m: usize = h[2].parse().map_err(|_| err(ln, "bad row count"))?;

    let mut qp = QpProblem {
        names: Vec::with_capacity(n),
        p: SparseMatrix::new(n, n),
        q: Vec::with_capacity(n),
        constant: 0.0,
        a: SparseMatrix::new(m, n),
        b: vec![0.0; m],
        lower: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
    };
    let float = |ln: usize, s: &str| s.parse::<f64>().map_err(|_| err(ln, "bad number"));
    let index = |ln: usize, s: &str, lim: usize| match s.parse::<usize>() {
        Ok(v) if v < lim => Ok(v),
        _ => Err(err(ln, "index out of range")),
    };
    for (ln, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match (t[0], t.len()) {
            ("var", 5) => {
                if qp.names.len() == n {
                    return Err(err(ln, "too many variables"));
                }
                qp.names.push(t[1].to_string());
                qp.lower.push(float(ln, t[2])?);
                qp.upper.push(float(ln, t[3])?);
                qp.q.push(float(ln, t[4])?);
            }
            ("const", 2) => qp.constant = float(ln, t[1])?,
            ("p", 4) => {
                let (i, j) = (index(ln, t[1], n)?, index(ln, t[2], n)?);
                qp.p.entries.push((i, j, float(ln, t[3])?));
            }
            ("a", 4) => {
                let (i, j) = (index(ln, t[1], m)?, index(ln, t[2], n)?);
                qp.a.entries.push((i, j, float(ln, t[3])?));
            }
            ("b", 3) => qp.b[index(ln, t[1], m)?] = float(ln, t[2])?,
            _ => return Err(err(ln, "unrecognized record")),
        }
    }
    if qp.names.len() != n {
        return Err(QpError::Parse(format!("expected {n} variables, found {}", qp.names.len())));
    }
    qp.check_dimensions()?;
    Ok(qp)
}
