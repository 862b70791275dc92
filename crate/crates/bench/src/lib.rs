//! Synthetic inputs for the benchmarks.

use ndarray::Array4;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use vulnalign_core::align::InputToken;
use vulnalign_core::{parse, Ast, AttentionTensor, ModelDump};

/// A C function with `statements` allocation, arithmetic and indexing lines.
pub fn synthetic_function(statements: usize) -> String {
    let mut code = String::from("int f(int *a, int n) {\n  int s = 0;\n");
    for i in 0..statements {
        match i % 4 {
            0 => code.push_str(&format!("  char *p{i} = malloc(n * {i});\n")),
            1 => code.push_str(&format!("  s += a[{i}] / (n - {i});\n")),
            2 => code.push_str(&format!("  if (s > {i}) {{ strcpy(p{}, \"x\"); }}\n", i - 2)),
            _ => code.push_str(&format!("  free(p{});\n", i - 3)),
        }
    }
    code.push_str("  return s;\n}\n");
    code
}

/// Row-stochastic random attention, `layers x heads x n x n`.
pub fn random_attention(layers: usize, heads: usize, n: usize, seed: u64) -> AttentionTensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut data = Array4::from_shape_fn((layers, heads, n, n), |_| rng.random::<f32>() + 1e-3);
    for mut row in data.rows_mut() {
        let sum: f32 = row.sum();
        row /= sum;
    }
    AttentionTensor::new(data).unwrap()
}

/// Splits every AST token longer than three bytes into two pieces, as a
/// subword tokenizer would, and wraps the result in BOS/EOS.
pub fn subword_tokens(ast: &Ast) -> Vec<InputToken> {
    let mut out = vec![InputToken::new(0, "<s>", None)];
    for t in ast.terminals() {
        let s = t.span.clone();
        if t.text.is_ascii() && t.text.len() > 3 {
            let mid = s.start + t.text.len() / 2;
            out.push(InputToken::new(out.len(), &t.text[..mid - s.start], Some(s.start..mid)));
            out.push(InputToken::new(out.len(), &t.text[mid - s.start..], Some(mid..s.end)));
        } else {
            out.push(InputToken::new(out.len(), t.text.clone(), Some(s)));
        }
    }
    out.push(InputToken::new(out.len(), "</s>", None));
    out
}

/// A parsed synthetic function with a matching random dump.
pub fn synthetic_example(statements: usize, layers: usize, heads: usize, seed: u64) -> (Ast, ModelDump) {
    let ast = parse(&synthetic_function(statements)).unwrap();
    let tokens = subword_tokens(&ast);
    let n = tokens.len();
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let attributions = ["saliency", "deeplift"]
        .iter()
        .map(|t| (t.to_string(), (0..n).map(|_| rng.random::<f64>()).collect()))
        .collect();
    let dump = ModelDump::new(
        "bench",
        tokens,
        Some(random_attention(layers, heads, n, seed)),
        attributions,
    )
    .unwrap();
    (ast, dump)
}
