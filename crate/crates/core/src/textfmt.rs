//! Number formatting shared by the text file formats.

/// Significant digits written for every floating-point field.
pub const SIG_DIGITS: usize = 9;

/// Formats `v` with [`SIG_DIGITS`] significant digits, trailing zeros removed.
///
/// Magnitudes in `[1e-4, 1e15)` are written in plain decimal, everything
/// else in scientific notation. Negative zero prints as `0`.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs();
    if (1e-4..1e15).contains(&mag) {
        // Round first so the exponent reflects carries such as 9.9999999995 -> 10.
        let sci = format!("{:.*e}", SIG_DIGITS - 1, v);
        let rounded: f64 = sci.parse().unwrap_or(v);
        let exp = rounded.abs().log10().floor() as i32;
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, rounded))
    } else {
        let s = format!("{:.*e}", SIG_DIGITS - 1, v);
        match s.split_once('e') {
            Some((mant, exp)) => format!("{}e{}", trim_zeros(mant.to_string()), exp),
            None => s,
        }
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

/// Fixed three-decimal formatting used by reports.
pub fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}
