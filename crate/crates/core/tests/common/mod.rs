//! Shared by the metric tests and the acceptance target.
#![allow(dead_code)]

use tstbt::corpus::Sentence;

/// Counting oracle written independently of the library: n-grams are
/// compared by linear scans over explicit lists.
pub mod oracle {
    fn grams<T: Clone + PartialEq>(xs: &[T], n: usize) -> Vec<Vec<T>> {
        if xs.len() < n {
            return vec![];
        }
        (0..=xs.len() - n).map(|i| xs[i..i + n].to_vec()).collect()
    }

    fn matches<T: Clone + PartialEq>(h: &[Vec<T>], r: &[Vec<T>]) -> usize {
        let mut pool: Vec<Option<&Vec<T>>> = r.iter().map(Some).collect();
        let mut m = 0;
        for g in h {
            if let Some(slot) = pool.iter_mut().find(|x| x.is_some_and(|y| y == g)) {
                *slot = None;
                m += 1;
            }
        }
        m
    }

    pub fn bleu(h: &[Vec<String>], r: &[Vec<String>]) -> f64 {
        let mut logs = vec![];
        for n in 1..=4 {
            let (mut m, mut th, mut tr) = (0, 0, 0);
            for (a, b) in h.iter().zip(r) {
                let (ga, gb) = (grams(a, n), grams(b, n));
                m += matches(&ga, &gb);
                th += ga.len();
                tr += gb.len();
            }
            if th == 0 && tr == 0 {
                continue;
            }
            if m == 0 {
                return 0.0;
            }
            logs.push((m as f64 / th as f64).ln());
        }
        let hl: usize = h.iter().map(Vec::len).sum();
        let rl: usize = r.iter().map(Vec::len).sum();
        if logs.is_empty() || hl == 0 {
            return 0.0;
        }
        let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
        100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }

    pub fn chrf(h: &[Vec<String>], r: &[Vec<String>]) -> f64 {
        let (mut ps, mut rs, mut k) = (0.0, 0.0, 0);
        for n in 1..=6 {
            let (mut m, mut th, mut tr) = (0, 0, 0);
            for (a, b) in h.iter().zip(r) {
                let ca: Vec<char> = a.concat().chars().collect();
                let cb: Vec<char> = b.concat().chars().collect();
                let (ga, gb) = (grams(&ca, n), grams(&cb, n));
                m += matches(&ga, &gb);
                th += ga.len();
                tr += gb.len();
            }
            if th == 0 && tr == 0 {
                continue;
            }
            k += 1;
            ps += if th > 0 { m as f64 / th as f64 } else { 0.0 };
            rs += if tr > 0 { m as f64 / tr as f64 } else { 0.0 };
        }
        if k == 0 {
            return 100.0;
        }
        let (p, r) = (ps / k as f64, rs / k as f64);
        if p + r == 0.0 {
            return 0.0;
        }
        100.0 * 5.0 * p * r / (4.0 * p + r)
    }
}

pub fn toks(c: &[Sentence]) -> Vec<Vec<String>> {
    c.iter().map(|x| x.tokens.clone()).collect()
}

/// (hypotheses, references, hand-computed BLEU, hand-computed ChrF)
pub const FIXTURES: &[(&[&str], &[&str], Option<f64>, Option<f64>)] = &[
    (&["a b c d"], &["a b c d"], Some(100.0), Some(100.0)),
    // precisions 4/4 3/3 2/2 1/1, BP = exp(1 - 5/4)
    (&["a b c d"], &["a b c d e"], Some(77.88), None),
    (&[""], &["a b c d"], Some(0.0), Some(0.0)),
    // no matching bigram
    (&["a a a a"], &["a b c d"], Some(0.0), None),
    // pooled: p1 5/6, p2 3/4, p3 2/2, p4 1/1 -> 0.625^(1/4)
    (&["a b c d", "e f"], &["a b c d", "e g"], Some(88.91), None),
    // BP = exp(1 - 8/4)
    (&["a b c d"], &["a b c d e f g h"], Some(36.79), None),
    // longer hypothesis: 4/5 * 3/4 * 2/3 * 1/2 = 0.2
    (&["a b c d e"], &["a b c d"], Some(66.87), None),
    // char orders 1-4: 3/4, 2/3, 1/2, 0/1 on both sides
    (&["abcd"], &["abce"], None, Some(47.92)),
    (&["abc"], &["xyz"], Some(0.0), Some(0.0)),
    // whitespace is not part of character n-grams
    (&["ab cd"], &["abcd"], None, Some(100.0)),
    // P = (1 + 1 + 0 + 0)/4, R = (1/2 + 1/3)/4, F2
    (&["ab"], &["abcd"], None, Some(23.58)),
    // three tokens on both sides: order 4 absent everywhere
    (&["x y z"], &["x y z"], Some(100.0), Some(100.0)),
];

pub fn corpus(xs: &[&str]) -> Vec<Sentence> {
    xs.iter().map(|x| Sentence::from_line(x)).collect()
}
