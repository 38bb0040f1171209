//! FLOPs cost model: 6 * tokens * params per trained token and
//! 2 * tokens * params per forward token, kept in exact integer arithmetic
//! (retraining a 6B model on 3T tokens reaches 1.08e23).

use crate::error::{Error, Result};
use crate::unlearn::MethodKind;

/// 6 * training tokens * parameter count.
pub fn training_flops(tokens: u128, params: u128) -> u128 {
    6 * tokens * params
}

/// 2 * forward tokens * parameter count.
pub fn forward_flops(tokens: u128, params: u128) -> u128 {
    2 * tokens * params
}

/// Unlearning cost of one method over `epochs` passes of the forget set.
///
/// Gradient ascent and random labels backpropagate the forget tokens once
/// per pass; adversarial sampling adds one forward pass to pick the
/// confusing tokens; hybrids train on an equal retain-token budget on top
/// of the forget tokens.
pub fn method_flops(method: MethodKind, forget_tokens: u128, params: u128, epochs: u128) -> u128 {
    let tokens = forget_tokens * epochs;
    match method {
        MethodKind::GradientAscent | MethodKind::RandomLabels => training_flops(tokens, params),
        MethodKind::Adversarial => training_flops(tokens, params) + forward_flops(tokens, params),
        MethodKind::AscentDescentInDist
        | MethodKind::AscentDescentGeneral
        | MethodKind::AscentKlInDist
        | MethodKind::AscentKlGeneral => 2 * training_flops(tokens, params),
    }
}

/// Inputs for a full cost table.
#[derive(Clone, Copy, Debug)]
pub struct CostInputs {
    pub params: u128,
    pub training_tokens: u128,
    pub forget_tokens: u128,
    pub epochs: u128,
}

impl CostInputs {
    /// The reference setting: a 6B-parameter model pre-trained on 3T tokens,
    /// forgetting 2000 chunks of 4096 tokens in one epoch.
    pub fn reference_6b() -> Self {
        CostInputs {
            params: 6_000_000_000,
            training_tokens: 3_000_000_000_000,
            forget_tokens: 2000 * 4096,
            epochs: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CostRow {
    pub label: String,
    pub flops: u128,
}

/// Retraining plus all seven methods.
pub fn cost_table(inputs: &CostInputs) -> Vec<CostRow> {
    let mut rows = vec![CostRow {
        label: "Retraining".to_string(),
        flops: training_flops(inputs.training_tokens, inputs.params),
    }];
    for kind in MethodKind::ALL {
        rows.push(CostRow {
            label: kind.label().to_string(),
            flops: method_flops(kind, inputs.forget_tokens, inputs.params, inputs.epochs),
        });
    }
    rows
}

/// Exact 3-significant-figure scientific notation for integers, e.g.
/// `1.08e23`, computed on the decimal digit string (no float rounding).
pub fn sci3(value: u128) -> String {
    if value == 0 {
        return "0.00e0".to_string();
    }
    let digits: Vec<u8> = value.to_string().bytes().map(|b| b - b'0').collect();
    let mut exp = digits.len() as i32 - 1;
    // Half-up rounding to 3 significant digits (5.89824e17 -> 5.90e17).
    let mut kept: Vec<u8> = digits.iter().take(3).copied().collect();
    while kept.len() < 3 {
        kept.push(0);
    }
    let mut carry = u8::from(digits.get(3).is_some_and(|&d| d >= 5));
    for slot in kept.iter_mut().rev() {
        if carry == 0 {
            break;
        }
        *slot += carry;
        if *slot == 10 {
            *slot = 0;
            carry = 1;
        } else {
            carry = 0;
        }
    }
    if carry == 1 {
        kept = vec![1, 0, 0];
        exp += 1;
    }
    format!("{}.{}{}e{}", kept[0], kept[1], kept[2], exp)
}

pub fn cost_table_text(rows: &[CostRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0);
    let mut out = format!("{:<width$}  {}\n", "Methods", "FLOPs", width = width);
    for row in rows {
        out.push_str(&format!("{:<width$}  {}\n", row.label, sci3(row.flops), width = width));
    }
    out
}

pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("method,flops,flops_sci\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.label, row.flops, sci3(row.flops)));
    }
    out
}

/// Parse a method name for the CLI; unknown names are an error.
pub fn parse_method(name: &str) -> Result<MethodKind> {
    name.parse::<MethodKind>().map_err(|_| Error::UnknownMethod(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: u128 = 6_000_000_000;
    const FORGET: u128 = 2000 * 4096;

    #[test]
    fn reference_table_values() {
        assert_eq!(sci3(training_flops(3_000_000_000_000, P)), "1.08e23");
        assert_eq!(sci3(method_flops(MethodKind::GradientAscent, FORGET, P, 1)), "2.95e17");
        assert_eq!(sci3(method_flops(MethodKind::RandomLabels, FORGET, P, 1)), "2.95e17");
        assert_eq!(sci3(method_flops(MethodKind::Adversarial, FORGET, P, 1)), "3.93e17");
        for hybrid in [
            MethodKind::AscentDescentInDist,
            MethodKind::AscentDescentGeneral,
            MethodKind::AscentKlInDist,
            MethodKind::AscentKlGeneral,
        ] {
            assert_eq!(sci3(method_flops(hybrid, FORGET, P, 1)), "5.90e17");
        }
    }

    #[test]
    fn exact_integer_values() {
        assert_eq!(training_flops(3_000_000_000_000, P), 108_000_000_000_000_000_000_000);
        assert_eq!(method_flops(MethodKind::GradientAscent, FORGET, P, 1), 294_912_000_000_000_000);
        assert_eq!(forward_flops(FORGET, P), 98_304_000_000_000_000);
        assert_eq!(
            method_flops(MethodKind::Adversarial, FORGET, P, 1),
            294_912_000_000_000_000 + 98_304_000_000_000_000
        );
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        assert_eq!(training_flops(0, P), 0);
        assert_eq!(forward_flops(0, P), 0);
        for kind in MethodKind::ALL {
            assert_eq!(method_flops(kind, 0, P, 1), 0);
        }
    }

    #[test]
    fn unit_forward_case() {
        assert_eq!(forward_flops(1, 1), 2);
    }

    #[test]
    fn ga_and_random_labels_cost_the_same() {
        for tokens in [1u128, 1000, FORGET] {
            assert_eq!(
                method_flops(MethodKind::GradientAscent, tokens, P, 1),
                method_flops(MethodKind::RandomLabels, tokens, P, 1)
            );
        }
    }

    #[test]
    fn retraining_to_ga_ratio_is_about_1e5() {
        let retrain = training_flops(3_000_000_000_000, P) as f64;
        let ga = method_flops(MethodKind::GradientAscent, FORGET, P, 1) as f64;
        let ratio = retrain / ga;
        assert!((ratio / 3.662e5 - 1.0).abs() < 1e-3, "ratio {ratio}");
        assert!(ratio > 1e5 && ratio < 1e6);
    }

    #[test]
    fn sci3_rounding() {
        assert_eq!(sci3(1), "1.00e0");
        assert_eq!(sci3(999), "9.99e2");
        assert_eq!(sci3(9996), "1.00e4");
        assert_eq!(sci3(589_824_000), "5.90e8");
        assert_eq!(sci3(294_912), "2.95e5");
        assert_eq!(sci3(393_216), "3.93e5");
        assert_eq!(sci3(0), "0.00e0");
    }

    #[test]
    fn unknown_method_is_an_error() {
        assert!(parse_method("sisa-fc").is_err());
        assert!(parse_method("gradient-ascent").is_ok());
    }

    #[test]
    fn table_has_eight_rows() {
        let rows = cost_table(&CostInputs::reference_6b());
        assert_eq!(rows.len(), 8);
        let text = cost_table_text(&rows);
        assert!(text.contains("1.08e23"));
        assert!(text.contains("5.90e17"));
        let csv = cost_table_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
    }
}
