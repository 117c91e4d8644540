//! Glob matching used everywhere a pattern appears: policy store selectors,
//! replication key filters, event patterns, binding patterns, and inspect
//! queries all share this one dialect.
//!
//! `*` matches any (possibly empty) sequence, `?` matches exactly one
//! character. Everything else matches literally. Matching is over chars.

pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    // Backtrack points: position of the last `*` and the text position
    // it has consumed up to.
    let (mut star, mut mark) = (usize::MAX, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = pi;
            mark = ti;
            pi += 1;
        } else if star != usize::MAX {
            pi = star + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// True if the pattern contains no wildcard, i.e. matches exactly one text.
pub fn is_literal(pattern: &str) -> bool {
    !pattern.contains('*') && !pattern.contains('?')
}
