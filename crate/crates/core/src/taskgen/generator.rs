//! Templated string-transformation tasks over the symbols `a`..`h`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Corpus, InstructionExample, Split};
use crate::numeric::rng::{derive_seed, rng, Rng};
use crate::{Error, Result};

pub const SYMBOLS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
pub const SEPARATORS: [&str; 4] = ["-", "+", "|", "/"];

/// One task semantics: a family plus its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Semantics {
    Reverse,
    Rotate(usize),
    Substitute(usize, usize),
    Select(usize),
    Uppercase(usize),
    Concat(usize),
    Filter(usize),
}

impl Semantics {
    pub fn all() -> Vec<Semantics> {
        let mut out = vec![Semantics::Reverse];
        out.extend((1..=3).map(Semantics::Rotate));
        for a in 0..SYMBOLS.len() {
            for b in 0..SYMBOLS.len() {
                if a != b {
                    out.push(Semantics::Substitute(a, b));
                }
            }
        }
        out.extend((1..=4).map(Semantics::Select));
        out.extend((0..SYMBOLS.len()).map(Semantics::Uppercase));
        out.extend((0..SEPARATORS.len()).map(Semantics::Concat));
        out.extend((0..SYMBOLS.len()).map(Semantics::Filter));
        out
    }

    pub fn family(self) -> &'static str {
        match self {
            Semantics::Reverse => "reverse",
            Semantics::Rotate(_) => "rotate",
            Semantics::Substitute(..) => "substitute",
            Semantics::Select(_) => "select",
            Semantics::Uppercase(_) => "uppercase",
            Semantics::Concat(_) => "concat",
            Semantics::Filter(_) => "filter",
        }
    }

    fn templates(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Semantics::Reverse => (
                &[
                    "reverse the sequence",
                    "write the symbols in reverse order",
                    "output the list backwards",
                    "flip the order of the items",
                ],
                &["mirror this row of letters", "read the letters from last to first"],
            ),
            Semantics::Rotate(_) => (
                &[
                    "rotate the sequence left by {n}",
                    "shift every symbol {n} places to the left",
                    "move the first {n} items to the end",
                    "cycle the list left {n} times",
                ],
                &[
                    "take {n} letters off the front and append them at the back",
                    "perform a left rotation of {n} steps",
                ],
            ),
            Semantics::Substitute(..) => (
                &[
                    "replace every {a} with {b}",
                    "change each {a} into {b}",
                    "substitute {b} for {a}",
                    "swap all {a} symbols for {b}",
                ],
                &["wherever {a} occurs write {b} instead", "turn all {a} letters to {b}"],
            ),
            Semantics::Select(_) => (
                &[
                    "output the item at position {k}",
                    "give the symbol in slot {k}",
                    "return element number {k}",
                    "pick entry {k} from the list",
                ],
                &["which letter is located at index {k}", "tell me what sits in place {k}"],
            ),
            Semantics::Uppercase(_) => (
                &[
                    "capitalize every {s}",
                    "write each {s} in uppercase",
                    "mark all {s} symbols with capitals",
                    "make the {s} letters uppercase",
                ],
                &["print {s} as a capital letter wherever it appears", "raise the case of each {s}"],
            ),
            Semantics::Concat(_) => (
                &[
                    "join the symbols with {sep}",
                    "put {sep} between the items",
                    "separate each symbol by {sep}",
                    "link the list using {sep}",
                ],
                &["insert a {sep} sign between neighbouring letters", "glue the letters together with {sep}"],
            ),
            Semantics::Filter(_) => (
                &[
                    "remove every {s}",
                    "delete all {s} symbols",
                    "drop each {s} from the list",
                    "filter out the {s} items",
                ],
                &["erase any {s} that appears", "keep everything except {s}"],
            ),
        }
    }

    pub fn train_templates(self) -> &'static [&'static str] {
        self.templates().0
    }

    pub fn ood_templates(self) -> &'static [&'static str] {
        self.templates().1
    }

    pub fn render(self, template: &str) -> String {
        let mut s = template.to_string();
        match self {
            Semantics::Reverse => {}
            Semantics::Rotate(n) => s = s.replace("{n}", &n.to_string()),
            Semantics::Substitute(a, b) => s = s.replace("{a}", SYMBOLS[a]).replace("{b}", SYMBOLS[b]),
            Semantics::Select(k) => s = s.replace("{k}", &k.to_string()),
            Semantics::Uppercase(i) | Semantics::Filter(i) => s = s.replace("{s}", SYMBOLS[i]),
            Semantics::Concat(i) => s = s.replace("{sep}", SEPARATORS[i]),
        }
        s
    }

    /// Applies the task to a symbol sequence.
    pub fn apply(self, xs: &[usize]) -> Vec<String> {
        let sym = |i: &usize| SYMBOLS[*i].to_string();
        match self {
            Semantics::Reverse => xs.iter().rev().map(sym).collect(),
            Semantics::Rotate(n) => {
                let n = n % xs.len().max(1);
                xs[n..].iter().chain(&xs[..n]).map(sym).collect()
            }
            Semantics::Substitute(a, b) => {
                xs.iter().map(|&x| SYMBOLS[if x == a { b } else { x }].to_string()).collect()
            }
            Semantics::Select(k) => vec![sym(&xs[k - 1])],
            Semantics::Uppercase(s) => xs
                .iter()
                .map(|&x| if x == s { SYMBOLS[x].to_uppercase() } else { SYMBOLS[x].to_string() })
                .collect(),
            Semantics::Concat(i) => {
                let mut out = Vec::new();
                for (j, x) in xs.iter().enumerate() {
                    if j > 0 {
                        out.push(SEPARATORS[i].to_string());
                    }
                    out.push(sym(x));
                }
                out
            }
            Semantics::Filter(s) => xs.iter().filter(|&&x| x != s).map(sym).collect(),
        }
    }

    /// Draws an input on which the task is well defined and non-trivial.
    fn sample_input(self, r: &mut Rng, min_len: usize, max_len: usize) -> Vec<usize> {
        loop {
            let len = r.random_range(min_len..=max_len);
            let xs: Vec<usize> = (0..len).map(|_| r.random_range(0..SYMBOLS.len())).collect();
            let ok = match self {
                Semantics::Rotate(n) => xs.len() > n,
                Semantics::Select(k) => xs.len() >= k,
                Semantics::Substitute(a, _) | Semantics::Uppercase(a) => xs.contains(&a),
                Semantics::Filter(s) => xs.contains(&s) && xs.iter().any(|&x| x != s),
                Semantics::Reverse | Semantics::Concat(_) => true,
            };
            if ok {
                return xs;
            }
        }
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|&i| SYMBOLS[i]).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Unique task strings across all splits.
    pub num_tasks: usize,
    /// Training examples (evaluation examples come on top).
    pub num_examples: usize,
    /// Fraction of unique tasks whose data is inlined and have no input.
    pub empty_input_fraction: f64,
    /// Fraction of tasks held out for each of the unseen and ood splits.
    pub heldout_fraction: f64,
    /// Examples drawn per held-out task that takes an input.
    pub eval_inputs_per_task: usize,
    /// Size of the seen split.
    pub seen_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            num_tasks: 600,
            num_examples: 8000,
            empty_input_fraction: 0.59,
            heldout_fraction: 0.1,
            eval_inputs_per_task: 4,
            seen_size: 300,
        }
    }
}

const INPUT_LEN: (usize, usize) = (3, 5);
const INLINE_LEN: (usize, usize) = (2, 3);

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.num_tasks < 20 {
        return Err(Error::InsufficientDiversity(format!(
            "need at least 20 tasks, got {}",
            spec.num_tasks
        )));
    }
    if !(0.0..=1.0).contains(&spec.empty_input_fraction) || !(0.0..0.5).contains(&spec.heldout_fraction) {
        return Err(Error::InvalidArgument("fractions out of range".into()));
    }
    let mut r = rng(derive_seed(spec.seed, "taskgen"));
    let num_empty = (spec.empty_input_fraction * spec.num_tasks as f64).round() as usize;
    let num_input = spec.num_tasks - num_empty;
    let held = |n: usize| (spec.heldout_fraction * n as f64).round() as usize;

    // Tasks with inputs: (semantics, template) combinations.
    let semantics = Semantics::all();
    let mut train_combos: Vec<(Semantics, &'static str)> = semantics
        .iter()
        .flat_map(|&s| s.train_templates().iter().map(move |&t| (s, t)))
        .collect();
    let mut ood_combos: Vec<(Semantics, &'static str)> = semantics
        .iter()
        .flat_map(|&s| s.ood_templates().iter().map(move |&t| (s, t)))
        .collect();
    balance_families(&mut train_combos, &mut r);
    balance_families(&mut ood_combos, &mut r);
    let (n_ood_in, n_unseen_in) = (held(num_input), held(num_input));
    let n_train_in = num_input - n_ood_in - n_unseen_in;
    if n_ood_in > ood_combos.len() || n_train_in + n_unseen_in > train_combos.len() || n_train_in == 0 {
        return Err(Error::InsufficientDiversity(format!(
            "{num_input} input-taking tasks requested; {} train-template and {} ood-template combinations exist",
            train_combos.len(),
            ood_combos.len()
        )));
    }
    // Held-out tasks take the front of the balanced list so every family
    // is represented among them.
    let unseen_in = &train_combos[..n_unseen_in];
    let train_in = &train_combos[n_unseen_in..n_unseen_in + n_train_in];
    let ood_in = &ood_combos[..n_ood_in];

    let mut seen_tasks: HashSet<String> = HashSet::new();
    let mut examples = Vec::new();
    let push = |examples: &mut Vec<InstructionExample>, sem: Semantics, task: String, input: &[usize], split| {
        examples.push(InstructionExample {
            task,
            input: join(input),
            output: sem.apply(input).join(" "),
            split,
            task_family: sem.family().to_string(),
        });
    };

    // Tasks without inputs carry their data inline and occur once.
    let (n_ood_empty, n_unseen_empty) = (held(num_empty), held(num_empty));
    let n_train_empty = num_empty - n_ood_empty - n_unseen_empty;
    let mut families: BTreeMap<&str, Vec<Semantics>> = BTreeMap::new();
    for &sem in &semantics {
        families.entry(sem.family()).or_default().push(sem);
    }
    let families: Vec<Vec<Semantics>> = families.into_values().collect();
    let mut empty_tasks = Vec::new();
    let mut attempts = 0;
    while empty_tasks.len() < num_empty {
        attempts += 1;
        if attempts > 1000 * (num_empty + 1) {
            return Err(Error::InsufficientDiversity("could not draw distinct inline tasks".into()));
        }
        let i = empty_tasks.len();
        let family = &families[r.random_range(0..families.len())];
        let sem = family[r.random_range(0..family.len())];
        let ood = i >= n_train_empty + n_unseen_empty;
        let templates = if ood { sem.ood_templates() } else { sem.train_templates() };
        let template = templates[r.random_range(0..templates.len())];
        let data = sem.sample_input(&mut r, INLINE_LEN.0.max(min_len(sem)), INLINE_LEN.1.max(min_len(sem)));
        let task = format!("{} : {}", sem.render(template), join(&data));
        if seen_tasks.insert(task.clone()) {
            let split = if i < n_train_empty {
                Split::Train
            } else if !ood {
                Split::Unseen
            } else {
                Split::Ood
            };
            empty_tasks.push((sem, task, data, split));
        }
    }
    for (sem, task, data, split) in &empty_tasks {
        examples.push(InstructionExample {
            task: task.clone(),
            input: String::new(),
            output: sem.apply(data).join(" "),
            split: *split,
            task_family: sem.family().to_string(),
        });
    }

    // Training examples for input-taking tasks, spread round-robin.
    let n_train_input_examples = spec.num_examples.checked_sub(n_train_empty).filter(|&n| n >= n_train_in).ok_or_else(|| {
        Error::InsufficientDiversity(format!(
            "{} training examples cannot cover {n_train_empty} inline tasks and {n_train_in} input tasks",
            spec.num_examples
        ))
    })?;
    let mut used: BTreeMap<usize, BTreeSet<Vec<usize>>> = BTreeMap::new();
    for j in 0..n_train_input_examples {
        let ti = j % n_train_in;
        let (sem, template) = train_in[ti];
        let xs = sem.sample_input(&mut r, INPUT_LEN.0, INPUT_LEN.1);
        used.entry(ti).or_default().insert(xs.clone());
        push(&mut examples, sem, sem.render(template), &xs, Split::Train);
    }

    // Seen split: training tasks with inputs never paired with them in training.
    for j in 0..spec.seen_size {
        let ti = j % n_train_in;
        let (sem, template) = train_in[ti];
        let xs = fresh_input(&mut r, sem, used.entry(ti).or_default())?;
        push(&mut examples, sem, sem.render(template), &xs, Split::Seen);
    }
    for (combos, split) in [(unseen_in, Split::Unseen), (ood_in, Split::Ood)] {
        for &(sem, template) in combos {
            let mut inputs = BTreeSet::new();
            for _ in 0..spec.eval_inputs_per_task {
                let xs = fresh_input(&mut r, sem, &mut inputs)?;
                push(&mut examples, sem, sem.render(template), &xs, split);
            }
        }
    }
    Ok(Corpus::new(examples))
}

/// Shuffles, then interleaves families round-robin so every prefix of the
/// list draws evenly from each family.
fn balance_families(combos: &mut Vec<(Semantics, &'static str)>, r: &mut Rng) {
    combos.shuffle(r);
    let mut by_family: BTreeMap<&str, Vec<(Semantics, &'static str)>> = BTreeMap::new();
    for c in combos.drain(..) {
        by_family.entry(c.0.family()).or_default().push(c);
    }
    let mut queues: Vec<_> = by_family.into_values().map(Vec::into_iter).collect();
    loop {
        let before = combos.len();
        for q in &mut queues {
            combos.extend(q.next());
        }
        if combos.len() == before {
            break;
        }
    }
}

fn min_len(sem: Semantics) -> usize {
    match sem {
        Semantics::Rotate(n) => n + 1,
        Semantics::Select(k) => k,
        Semantics::Filter(_) => 2,
        _ => 1,
    }
}

fn fresh_input(r: &mut Rng, sem: Semantics, used: &mut BTreeSet<Vec<usize>>) -> Result<Vec<usize>> {
    for _ in 0..10_000 {
        let xs = sem.sample_input(r, INPUT_LEN.0, INPUT_LEN.1);
        if used.insert(xs.clone()) {
            return Ok(xs);
        }
    }
    Err(Error::InsufficientDiversity(format!("ran out of fresh inputs for {sem:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_example() {
        let xs = [0, 1, 2];
        assert_eq!(Semantics::Reverse.apply(&xs).join(" "), "c b a");
        assert_eq!(Semantics::Reverse.render("reverse the sequence"), "reverse the sequence");
    }

    #[test]
    fn family_semantics() {
        let xs = [0, 1, 2, 0];
        assert_eq!(Semantics::Rotate(1).apply(&xs).join(" "), "b c a a");
        assert_eq!(Semantics::Substitute(0, 7).apply(&xs).join(" "), "h b c h");
        assert_eq!(Semantics::Select(2).apply(&xs).join(" "), "b");
        assert_eq!(Semantics::Uppercase(0).apply(&xs).join(" "), "A b c A");
        assert_eq!(Semantics::Concat(2).apply(&xs).join(" "), "a | b | c | a");
        assert_eq!(Semantics::Filter(0).apply(&xs).join(" "), "b c");
    }

    #[test]
    fn semantics_count() {
        assert_eq!(Semantics::all().len(), 1 + 3 + 56 + 4 + 8 + 4 + 8);
    }

    #[test]
    fn too_few_tasks_rejected() {
        let spec = CorpusSpec { num_tasks: 10, ..CorpusSpec::default() };
        assert!(matches!(generate_corpus(&spec), Err(Error::InsufficientDiversity(_))));
    }
}
