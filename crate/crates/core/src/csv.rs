//! Plain CSV output with a fixed float format.

use std::io::Write;

use crate::error::{DurrError, Result};

/// Six significant digits, `%g` style: fixed notation for exponents in `-4..6`,
/// otherwise `1.23457e8`. Trailing zeros are dropped.
pub fn sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        trim_zeros(format!("{:.*}", (5 - exp) as usize, v))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Round-trippable representation for detail files.
pub fn full(v: f64) -> String {
    format!("{v:?}")
}

/// Writes one row, mapping I/O failures to a data error naming `what`.
pub fn write_row(out: &mut dyn Write, fields: &[String], what: &str) -> Result<()> {
    writeln!(out, "{}", fields.join(",")).map_err(|e| DurrError::io(what, e))
}
