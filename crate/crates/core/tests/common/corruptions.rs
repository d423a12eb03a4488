use std::collections::{BTreeSet, HashMap};

use ssm_circuits::ioi::{answer_of, template_name_indices, PromptPair};

/// Relabels letters by first appearance across both prompts.
pub fn canon(clean: &[u8; 5], clean_ans: u8, corr: &[u8; 5], corr_ans: u8) -> String {
    let mut map: HashMap<u8, char> = HashMap::new();
    let mut name = |x: u8| {
        let next = (b'A' + map.len() as u8) as char;
        *map.entry(x).or_insert(next)
    };
    let a: String = clean.iter().map(|&x| name(x)).collect();
    let ca = name(clean_ans);
    let b: String = corr.iter().map(|&x| name(x)).collect();
    let cb = name(corr_ans);
    format!(
        "{} {} {ca} -> {} {} {cb}",
        &a[..3],
        &a[3..],
        &b[..3],
        &b[3..]
    )
}

pub fn unordered(c: &[u8; 5], ca: u8, d: &[u8; 5], da: u8) -> String {
    canon(c, ca, d, da).min(canon(d, da, c, ca))
}

pub fn answer(p: &[u8; 5]) -> Option<u8> {
    answer_of(&p.map(|x| x as usize)).map(|x| x as u8)
}

/// Every single-name substitution of every clean prompt shape that keeps a
/// valid prompt and flips the answer, as (directed, unordered) key sets.
pub fn enumerate() -> (BTreeSet<String>, BTreeSet<String>) {
    let mut directed = BTreeSet::new();
    let mut undirected = BTreeSet::new();
    let s1 = *b"ABC";
    for io in 0..3 {
        let rest: Vec<u8> = s1.iter().copied().filter(|&x| x != s1[io]).collect();
        let clean = [s1[0], s1[1], s1[2], rest[0], rest[1]];
        let clean_ans = answer(&clean).unwrap();
        let mut options: Vec<[u8; 5]> = Vec::new();
        for x in s1 {
            options.push(clean.map(|y| if y == x { b'D' } else { y }));
        }
        for slot in 3..5 {
            for y in s1 {
                if y != clean[slot] {
                    let mut c = clean;
                    c[slot] = y;
                    options.push(c);
                }
            }
        }
        for corr in options {
            if let Some(a) = answer(&corr) {
                if a != clean_ans {
                    directed.insert(canon(&clean, clean_ans, &corr, a));
                    undirected.insert(unordered(&clean, clean_ans, &corr, a));
                }
            }
        }
    }
    (directed, undirected)
}

pub fn letters(p: &str) -> ([u8; 5], u8) {
    let l: Vec<u8> = p.bytes().filter(u8::is_ascii_alphabetic).collect();
    ([l[0], l[1], l[2], l[3], l[4]], l[5])
}

pub fn observed_key(p: &PromptPair) -> (String, String) {
    let idx = template_name_indices(p.template);
    let c = idx.map(|i| p.clean[i] as u8);
    let d = idx.map(|i| p.corrupted[i] as u8);
    (
        canon(&c, p.answer as u8, &d, p.corrupted_answer as u8),
        unordered(&c, p.answer as u8, &d, p.corrupted_answer as u8),
    )
}
