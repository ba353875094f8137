//! Fixed text formats for the TSV outputs, following C's `%.6g` and `%.6e`
//! so that tables can be compared byte-for-byte with other tools.

/// Missing value marker.
pub const NA: &str = "NA";

/// Rewrites Rust's `1.5e-7` exponent as `1.5e-07`.
fn c_exponent(rust_sci: &str) -> String {
    let (mantissa, exp) = rust_sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn strip_fraction_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `%.6e`: seven significant digits in scientific notation.
pub fn sci(x: f64) -> String {
    if !x.is_finite() {
        return special(x);
    }
    c_exponent(&format!("{x:.6e}"))
}

/// `%.6g`: six significant digits, fixed or scientific by magnitude,
/// without trailing zeros.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return special(x);
    }
    let rounded = format!("{x:.5e}");
    let exp: i32 = rounded
        .split_once('e')
        .expect("scientific format")
        .1
        .parse()
        .expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        strip_fraction_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let (mantissa, _) = rounded.split_once('e').expect("scientific format");
        c_exponent(&format!("{}e{exp}", strip_fraction_zeros(mantissa)))
    }
}

fn special(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Formats an optional value, writing [`NA`] when absent.
pub fn opt(x: Option<f64>, f: fn(f64) -> String) -> String {
    x.map_or_else(|| NA.to_string(), f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_c_printf() {
        // reference strings from printf("%.6g") / printf("%.6e")
        let cases = [
            (0.0, "0", "0.000000e+00"),
            (1.0, "1", "1.000000e+00"),
            (-2.5, "-2.5", "-2.500000e+00"),
            (123456.7, "123457", "1.234567e+05"),
            (999999.5, "1e+06", "9.999995e+05"),
            (1234567.0, "1.23457e+06", "1.234567e+06"),
            (0.0001234567, "0.000123457", "1.234567e-04"),
            (0.00001234567, "1.23457e-05", "1.234567e-05"),
            (3.0e-120, "3e-120", "3.000000e-120"),
            (0.1, "0.1", "1.000000e-01"),
            (-std::f64::consts::FRAC_1_SQRT_2, "-0.707107", "-7.071068e-01"),
        ];
        for (x, g, e) in cases {
            assert_eq!(sig6(x), g, "{x} %g");
            assert_eq!(sci(x), e, "{x} %e");
        }
    }

    #[test]
    fn optional_values() {
        assert_eq!(opt(None, sci), "NA");
        assert_eq!(opt(Some(0.5), sig6), "0.5");
    }
}
