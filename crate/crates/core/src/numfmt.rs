//! Fixed-precision number formatting for result files.

/// Significant digits used in every CSV the crate writes.
pub const CSV_DIGITS: usize = 6;

/// Formats like C's `%.{digits}g`: shortest of fixed and scientific notation
/// with trailing zeros removed. Infinities are written as `inf` / `-inf`.
pub fn format_sig(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

/// Shorthand for [`format_sig`] at [`CSV_DIGITS`].
pub fn csv_num(x: f64) -> String {
    format_sig(x, CSV_DIGITS)
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `mean±sd` with two decimals, the layout of the summary tables.
pub fn mean_pm_sd(mean: f64, sd: f64) -> String {
    let fmt = |v: f64| {
        if v.is_infinite() {
            if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
        } else {
            format!("{v:.2}")
        }
    };
    format!("{}±{}", fmt(mean), fmt(sd))
}

/// Parses a decimal cell, accepting the `inf` tokens written by [`format_sig`].
pub fn parse_num(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        other => other.parse().ok(),
    }
}
