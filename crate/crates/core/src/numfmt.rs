//! Decimal formatting with a fixed number of significant digits, in the style
//! of C's `%.9g`. Parsing the output and formatting again yields the same text.

/// Significant digits used by every text format in this crate.
pub const SIG_DIGITS: usize = 9;

/// Formats `x` with `SIG_DIGITS` significant digits. Negative zero prints as `0`.
pub fn fmt_sig(x: f64) -> String {
    fmt_sig_n(x, SIG_DIGITS)
}

pub fn fmt_sig_n(x: f64, digits: usize) -> String {
    debug_assert!(digits >= 1);
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    // Round once in scientific form; the exponent after rounding decides the layout.
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_fraction(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds `x` to the value its formatted text parses back to.
pub fn quantize(x: f64) -> f64 {
    fmt_sig(x).parse().expect("formatted number parses")
}
