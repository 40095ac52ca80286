//! Plain-text MDP tables.
//!
//! ```text
//! # comments start with '#', blank lines are ignored
//! <|S|> <|A|> <gamma>
//! <|S|·|A| lines: P[s][a][0..|S|], in (s, a) order>
//! <|S| lines: R[s][0..|A|]>
//! <1 line: p0[0..|S|]>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a write/read cycle is lossless.

use super::TabularMdp;
use crate::error::{Error, Result};
use std::fmt::Write as _;

pub fn write_mdp(mdp: &TabularMdp) -> String {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = String::new();
    let row = |out: &mut String, xs: &mut dyn Iterator<Item = f64>| {
        let line: Vec<String> = xs.map(|x| format!("{x:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    };
    let _ = writeln!(out, "{n} {na} {:?}", mdp.gamma());
    let _ = writeln!(out, "# transitions P[s][a][s']");
    for s in 0..n {
        for a in 0..na {
            row(&mut out, &mut mdp.transition(s, a).iter().copied());
        }
    }
    let _ = writeln!(out, "# rewards R[s][a]");
    for s in 0..n {
        row(&mut out, &mut (0..na).map(|a| mdp.reward(s, a)));
    }
    let _ = writeln!(out, "# initial distribution");
    row(&mut out, &mut mdp.initial().iter().copied());
    out
}

pub fn read_mdp(text: &str) -> Result<TabularMdp> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let parse_row = |line: usize, l: &str, want: usize| -> Result<Vec<f64>> {
        let xs: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{t:?}: {e}") }))
            .collect::<Result<_>>()?;
        if xs.len() != want {
            return Err(Error::Parse { line, msg: format!("expected {want} values, found {}", xs.len()) });
        }
        Ok(xs)
    };
    let missing = |what: &str| Error::Parse { line: 0, msg: format!("unexpected end of input, missing {what}") };
    let (hl, header) = lines.next().ok_or_else(|| missing("header"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(Error::Parse { line: hl, msg: "header must be '<states> <actions> <gamma>'".into() });
    }
    let bad = |msg: String| Error::Parse { line: hl, msg };
    let n: usize = h[0].parse().map_err(|e| bad(format!("state count: {e}")))?;
    let na: usize = h[1].parse().map_err(|e| bad(format!("action count: {e}")))?;
    let gamma: f64 = h[2].parse().map_err(|e| bad(format!("discount: {e}")))?;
    let mut p = Vec::with_capacity(n * na * n);
    for _ in 0..n * na {
        let (ln, l) = lines.next().ok_or_else(|| missing("transition rows"))?;
        p.extend(parse_row(ln, l, n)?);
    }
    let mut r = Vec::with_capacity(n * na);
    for _ in 0..n {
        let (ln, l) = lines.next().ok_or_else(|| missing("reward rows"))?;
        r.extend(parse_row(ln, l, na)?);
    }
    let (ln, l) = lines.next().ok_or_else(|| missing("initial distribution"))?;
    let p0 = parse_row(ln, l, n)?;
    if let Some((ln, _)) = lines.next() {
        return Err(Error::Parse { line: ln, msg: "trailing data".into() });
    }
    TabularMdp::new(n, na, gamma, p, r, p0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = TabularMdp::random(&mut rng, 5, 3, 0.95).unwrap();
        assert_eq!(read_mdp(&write_mdp(&m)).unwrap(), m);
    }

    #[test]
    fn parses_commented_table() {
        let text = "# two states\n2 1 0.5\n0 1\n1 0 # swap\n\n1\n0\n0.5 0.5\n";
        let m = read_mdp(text).unwrap();
        assert_eq!(m.transition(0, 0), &[0.0, 1.0]);
        assert_eq!(m.reward(1, 0), 0.0);
    }

    #[test]
    fn reports_the_offending_line() {
        let err = read_mdp("2 1 0.5\n0 1\n1 x\n1\n0\n0.5 0.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
