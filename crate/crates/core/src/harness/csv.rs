//! CSV output with a fixed header and 12-significant-digit reals.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::experiment::ExperimentRow;

pub const CSV_HEADER: &str = "n,d,replicates,empirical_d1,mc_stderr,A_n,kappa1,bound,valid,rate_only,seed";

/// Formats like C's `%.12g`: 12 significant digits, trailing zeros removed,
/// scientific notation for exponents below -4 or at least 12.
pub fn format_g12(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..12).contains(&exp) {
        let fixed = format!("{x:.*}", (11 - exp) as usize);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// The CSV document for `rows`, LF line endings.
pub fn render_csv(rows: &[ExperimentRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.d,
            r.replicates,
            format_g12(r.empirical_d1),
            format_g12(r.mc_stderr),
            format_g12(r.a_n),
            format_g12(r.kappa1),
            format_g12(r.bound),
            r.valid,
            r.rate_only,
            r.seed
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn emit_csv(rows: &[ExperimentRow], path: &Path) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_csv(rows).as_bytes())?;
    file.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g12_matches_c_printf() {
        let cases = [
            (0.5, "0.5"),
            (1.0, "1"),
            (100.0, "100"),
            (1.0 / 3.0, "0.333333333333"),
            (2.0 / 3.0, "0.666666666667"),
            (1e-5, "1e-05"),
            (1.234e-5, "1.234e-05"),
            (0.0001, "0.0001"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (9.9999999999999, "10"),
            (-2.5e20, "-2.5e+20"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g12(x), want, "{x}");
        }
    }

    #[test]
    fn header_only_for_no_rows() {
        assert_eq!(render_csv(&[]), format!("{CSV_HEADER}\n"));
    }
}
