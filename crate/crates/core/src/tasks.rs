//! Synthetic discrete ICL tasks, prompt layout and prompt corruptions.
//!
//! Every example occupies exactly four tokens `[x, IO_SEP, y, EX_SEP]`, the
//! query is the single token `x_{n+1}` and the prompt ends with a standalone
//! `IO_SEP` at `t_final`. A prompt with `n` examples therefore has length
//! `4n + 2`, and any two prompts with the same shot count share positions.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const EXAMPLE_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    n_symbols: u32,
}

impl Vocab {
    pub fn new(n_symbols: u32) -> Result<Self> {
        if n_symbols + 3 < 8 {
            return Err(Error::Task(format!(
                "vocabulary must hold at least 8 tokens, {n_symbols} symbols + 3 specials is too small"
            )));
        }
        Ok(Self { n_symbols })
    }

    pub fn n_symbols(&self) -> u32 {
        self.n_symbols
    }

    pub fn io_sep(&self) -> TokenId {
        self.n_symbols
    }

    pub fn ex_sep(&self) -> TokenId {
        self.n_symbols + 1
    }

    pub fn pad(&self) -> TokenId {
        self.n_symbols + 2
    }

    pub fn size(&self) -> usize {
        self.n_symbols as usize + 3
    }

    pub fn is_symbol(&self, t: TokenId) -> bool {
        t < self.n_symbols
    }

    /// Input space of size `x_size`: the first `x_size` symbols.
    fn inputs(&self, x_size: usize) -> Vec<TokenId> {
        (0..x_size as u32).collect()
    }

    /// Output range of size `y_size`: the last `y_size` symbols.
    fn outputs(&self, y_size: usize) -> Vec<TokenId> {
        (self.n_symbols - y_size as u32..self.n_symbols).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Normal,
    AmbiguousMember,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub input_space: Vec<TokenId>,
    pub mapping: BTreeMap<TokenId, TokenId>,
    pub family: TaskFamily,
}

impl TaskDef {
    pub fn apply(&self, x: TokenId) -> Result<TokenId> {
        self.mapping
            .get(&x)
            .copied()
            .ok_or_else(|| Error::Task(format!("input {x} outside the domain of task {}", self.name)))
    }

    fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.input_space.is_empty() {
            return Err(Error::Task(format!("task {} has an empty input space", self.name)));
        }
        for x in &self.input_space {
            let y = self.apply(*x)?;
            if !vocab.is_symbol(*x) || !vocab.is_symbol(y) {
                return Err(Error::Task(format!(
                    "task {} uses tokens outside the vocabulary symbols",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMember {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguousPair {
    pub task_a: TaskDef,
    pub task_b: TaskDef,
    /// Inputs where both tasks agree, sorted ascending.
    pub ambiguous_inputs: Vec<TokenId>,
}

impl AmbiguousPair {
    pub fn member(&self, which: PairMember) -> &TaskDef {
        match which {
            PairMember::A => &self.task_a,
            PairMember::B => &self.task_b,
        }
    }

    pub fn member_named(&self, name: &str) -> Option<PairMember> {
        if self.task_a.name == name {
            Some(PairMember::A)
        } else if self.task_b.name == name {
            Some(PairMember::B)
        } else {
            None
        }
    }

    pub fn is_ambiguous(&self, x: TokenId) -> bool {
        self.ambiguous_inputs.binary_search(&x).is_ok()
    }

    pub fn unambiguous_inputs(&self) -> Vec<TokenId> {
        self.task_a
            .input_space
            .iter()
            .copied()
            .filter(|x| !self.is_ambiguous(*x))
            .collect()
    }
}

pub fn make_normal_task(vocab: &Vocab, seed: u64, x_size: usize, y_size: usize) -> Result<TaskDef> {
    check_sizes(vocab, x_size, y_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = vocab.outputs(y_size);
    let input_space = vocab.inputs(x_size);
    let mapping = input_space
        .iter()
        .map(|&x| (x, outputs[rng.gen_range(0..outputs.len())]))
        .collect();
    Ok(TaskDef {
        name: format!("normal_{seed}"),
        input_space,
        mapping,
        family: TaskFamily::Normal,
    })
}

pub fn make_ambiguous_pair(
    vocab: &Vocab,
    seed: u64,
    x_size: usize,
    y_size: usize,
    overlap_fraction: f64,
) -> Result<AmbiguousPair> {
    check_sizes(vocab, x_size, y_size)?;
    if !(overlap_fraction > 0.0 && overlap_fraction < 1.0) {
        return Err(Error::Task("overlap_fraction must lie in (0, 1)".into()));
    }
    let k = (overlap_fraction * x_size as f64 + 1e-9).floor() as usize;
    if k < 1 || k >= x_size {
        return Err(Error::Task(format!(
            "overlap {overlap_fraction} of {x_size} inputs gives a degenerate agreement set of size {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = vocab.outputs(y_size);
    let input_space = vocab.inputs(x_size);
    let map_a: BTreeMap<TokenId, TokenId> = input_space
        .iter()
        .map(|&x| (x, outputs[rng.gen_range(0..outputs.len())]))
        .collect();
    let mut shuffled = input_space.clone();
    shuffled.shuffle(&mut rng);
    let mut ambiguous_inputs: Vec<TokenId> = shuffled[..k].to_vec();
    ambiguous_inputs.sort_unstable();
    let map_b = input_space
        .iter()
        .map(|&x| {
            let ya = map_a[&x];
            if ambiguous_inputs.binary_search(&x).is_ok() {
                (x, ya)
            } else {
                let others: Vec<TokenId> = outputs.iter().copied().filter(|&y| y != ya).collect();
                (x, others[rng.gen_range(0..others.len())])
            }
        })
        .collect();
    Ok(AmbiguousPair {
        task_a: TaskDef {
            name: format!("ambig_{seed}_a"),
            input_space: input_space.clone(),
            mapping: map_a,
            family: TaskFamily::AmbiguousMember,
        },
        task_b: TaskDef {
            name: format!("ambig_{seed}_b"),
            input_space,
            mapping: map_b,
            family: TaskFamily::AmbiguousMember,
        },
        ambiguous_inputs,
    })
}

fn check_sizes(vocab: &Vocab, x_size: usize, y_size: usize) -> Result<()> {
    if x_size < 4 {
        return Err(Error::Task(format!("x_size must be at least 4, got {x_size}")));
    }
    if y_size < 2 {
        return Err(Error::Task(format!("y_size must be at least 2, got {y_size}")));
    }
    let n = vocab.n_symbols() as usize;
    if x_size > n || y_size > n {
        return Err(Error::Task(format!(
            "sizes x={x_size}, y={y_size} exceed the {n} vocabulary symbols"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleFlag {
    Ambiguous,
    Unambiguous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    /// `Ex_1 … Ex_n` followed by `Q`.
    pub spans: Vec<Span>,
    pub t_final: usize,
    pub example_flags: Vec<ExampleFlag>,
    pub answer: TokenId,
    pub task: String,
}

impl Prompt {
    pub fn from_parts(
        vocab: &Vocab,
        examples: &[(TokenId, TokenId)],
        flags: Vec<ExampleFlag>,
        query: TokenId,
        answer: TokenId,
        task: &str,
    ) -> Self {
        let n = examples.len();
        let mut tokens = Vec::with_capacity(EXAMPLE_LEN * n + 2);
        let mut spans = Vec::with_capacity(n + 1);
        for &(x, y) in examples {
            let start = tokens.len();
            tokens.extend_from_slice(&[x, vocab.io_sep(), y, vocab.ex_sep()]);
            spans.push(Span { start, end: tokens.len() });
        }
        spans.push(Span {
            start: tokens.len(),
            end: tokens.len() + 1,
        });
        tokens.push(query);
        tokens.push(vocab.io_sep());
        Self {
            t_final: tokens.len() - 1,
            tokens,
            spans,
            example_flags: flags,
            answer,
            task: task.to_string(),
        }
    }

    /// Zero-shot prompt `(x, IO_SEP)`.
    pub fn zero_shot(vocab: &Vocab, task: &TaskDef, x: TokenId) -> Result<Self> {
        Ok(Self::from_parts(vocab, &[], Vec::new(), x, task.apply(x)?, &task.name))
    }

    pub fn n_shots(&self) -> usize {
        self.spans.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn example_span(&self, i: usize) -> Span {
        self.spans[i]
    }

    pub fn query_span(&self) -> Span {
        self.spans[self.n_shots()]
    }

    pub fn query(&self) -> TokenId {
        self.tokens[self.query_span().start]
    }

    pub fn example(&self, i: usize) -> (TokenId, TokenId) {
        let s = self.spans[i].start;
        (self.tokens[s], self.tokens[s + 2])
    }

    /// Component index of every position: examples `0..n`, query `n`,
    /// `t_final` gets `n + 1`.
    pub fn component_of(&self) -> Vec<usize> {
        let mut comp = vec![self.n_shots() + 1; self.len()];
        for (c, span) in self.spans.iter().enumerate() {
            for p in span.positions() {
                comp[p] = c;
            }
        }
        comp
    }

    /// Same length, spans and `t_final` (what patching donors require).
    pub fn same_layout(&self, other: &Prompt) -> bool {
        self.tokens.len() == other.tokens.len()
            && self.spans == other.spans
            && self.t_final == other.t_final
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let fail = |msg: String| Err(Error::Task(format!("invalid prompt: {msg}")));
        let n = self.n_shots();
        if self.spans.is_empty() {
            return fail("missing query span".into());
        }
        if self.example_flags.len() != n {
            return fail(format!("{} flags for {n} examples", self.example_flags.len()));
        }
        if self.tokens.len() != EXAMPLE_LEN * n + 2 || self.t_final != self.tokens.len() - 1 {
            return fail("t_final must be the last index of a 4n+2 token sequence".into());
        }
        let mut cursor = 0;
        for (i, span) in self.spans.iter().enumerate() {
            let want = if i < n { EXAMPLE_LEN } else { 1 };
            if span.start != cursor || span.end != cursor + want {
                return fail(format!("span {i} is {span:?}, expected start {cursor} len {want}"));
            }
            cursor = span.end;
        }
        if cursor != self.t_final {
            return fail("spans must cover every token except t_final".into());
        }
        for i in 0..n {
            let s = self.spans[i].start;
            let t = &self.tokens[s..s + 4];
            if !vocab.is_symbol(t[0]) || t[1] != vocab.io_sep() || !vocab.is_symbol(t[2]) || t[3] != vocab.ex_sep() {
                return fail(format!("example {i} is not [x, IO_SEP, y, EX_SEP]"));
            }
        }
        if !vocab.is_symbol(self.query()) || self.tokens[self.t_final] != vocab.io_sep() {
            return fail("query must be a symbol followed by IO_SEP".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalSetting {
    /// Unambiguous examples at positions 2, 4, 6, … (1-indexed).
    Setting1,
    /// Unambiguous examples at positions 3, 6, 9, …, topped up from the end.
    Setting2,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolicy {
    /// Query drawn from inputs where the paired tasks disagree.
    Disagreement,
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub allow_repeats: bool,
    pub query_policy: QueryPolicy,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            allow_repeats: true,
            query_policy: QueryPolicy::Disagreement,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum PromptSource<'a> {
    Task(&'a TaskDef),
    Pair(&'a AmbiguousPair, PairMember),
}

/// Unambiguous examples in an `n`-shot ambiguous prompt: `n / 3` rounded to
/// nearest (1, 2, 3 for n = 3, 5, 10).
pub fn unambiguous_count(n: usize) -> usize {
    (n + 1) / 3
}

/// 0-indexed example slots holding unambiguous examples.
pub fn unambiguous_slots<R: Rng>(n: usize, setting: PositionalSetting, rng: &mut R) -> Vec<usize> {
    let u = unambiguous_count(n);
    let mut slots: Vec<usize> = match setting {
        PositionalSetting::Setting1 => (1..n).step_by(2).take(u).collect(),
        PositionalSetting::Setting2 => {
            let mut s: Vec<usize> = (2..n).step_by(3).take(u).collect();
            let mut back = n;
            while s.len() < u && back > 0 {
                back -= 1;
                if !s.contains(&back) {
                    s.push(back);
                }
            }
            s
        }
        PositionalSetting::Uniform => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(u);
            all
        }
    };
    slots.sort_unstable();
    slots
}

/// Draws `count` inputs from `pool`, without replacement until the pool is
/// exhausted.
fn draw<R: Rng>(pool: &[TokenId], count: usize, allow_repeats: bool, rng: &mut R) -> Result<Vec<TokenId>> {
    if pool.is_empty() && count > 0 {
        return Err(Error::Task("cannot draw from an empty input pool".into()));
    }
    if count > pool.len() && !allow_repeats {
        return Err(Error::Task(format!(
            "need {count} distinct inputs but only {} exist and repeats are disabled",
            pool.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut round = pool.to_vec();
        round.shuffle(rng);
        out.extend(round.into_iter().take(count - out.len()));
    }
    Ok(out)
}

fn pick_query<R: Rng>(candidates: &[TokenId], used: &[TokenId], rng: &mut R) -> Result<TokenId> {
    let fresh: Vec<TokenId> = candidates.iter().copied().filter(|x| !used.contains(x)).collect();
    let pool = if fresh.is_empty() { candidates } else { &fresh };
    pool.choose(rng)
        .copied()
        .ok_or_else(|| Error::Task("no candidate query inputs".into()))
}

pub fn sample_prompt(
    vocab: &Vocab,
    source: PromptSource<'_>,
    n: usize,
    setting: PositionalSetting,
    seed: u64,
    opts: SamplingOptions,
) -> Result<Prompt> {
    if n == 0 {
        return Err(Error::Task("shot count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match source {
        PromptSource::Task(task) => {
            task.check_vocab(vocab)?;
            let inputs = draw(&task.input_space, n, opts.allow_repeats, &mut rng)?;
            let examples = inputs
                .iter()
                .map(|&x| Ok((x, task.apply(x)?)))
                .collect::<Result<Vec<_>>>()?;
            let query = pick_query(&task.input_space, &inputs, &mut rng)?;
            Ok(Prompt::from_parts(
                vocab,
                &examples,
                vec![ExampleFlag::Unambiguous; n],
                query,
                task.apply(query)?,
                &task.name,
            ))
        }
        PromptSource::Pair(pair, which) => {
            let task = pair.member(which);
            task.check_vocab(vocab)?;
            let slots = unambiguous_slots(n, setting, &mut rng);
            let unamb_pool = pair.unambiguous_inputs();
            let unamb = draw(&unamb_pool, slots.len(), opts.allow_repeats, &mut rng)?;
            let amb = draw(&pair.ambiguous_inputs, n - slots.len(), opts.allow_repeats, &mut rng)?;
            let (mut ui, mut ai) = (unamb.iter(), amb.iter());
            let mut examples = Vec::with_capacity(n);
            let mut flags = Vec::with_capacity(n);
            for i in 0..n {
                let (x, flag) = if slots.contains(&i) {
                    (*ui.next().unwrap(), ExampleFlag::Unambiguous)
                } else {
                    (*ai.next().unwrap(), ExampleFlag::Ambiguous)
                };
                examples.push((x, task.apply(x)?));
                flags.push(flag);
            }
            let used: Vec<TokenId> = examples.iter().map(|e| e.0).collect();
            let candidates = match opts.query_policy {
                QueryPolicy::Disagreement => unamb_pool,
                QueryPolicy::Any => task.input_space.clone(),
            };
            let query = pick_query(&candidates, &used, &mut rng)?;
            Ok(Prompt::from_parts(vocab, &examples, flags, query, task.apply(query)?, &task.name))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    ShuffledLabels,
    ExamplesOtherTask,
    QueryReplace,
    AmbigKeyPool,
    UnambigKeyPool,
}

#[derive(Clone, Copy, Debug)]
pub enum Donor<'a> {
    None,
    Task(&'a TaskDef),
    /// The ambiguous pair the prompt was sampled from (Key-pool corruptions).
    Pair(&'a AmbiguousPair),
}

pub fn corrupt_prompt(
    vocab: &Vocab,
    p: &Prompt,
    kind: CorruptionKind,
    donor: Donor<'_>,
    seed: u64,
) -> Result<Prompt> {
    p.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.n_shots();
    let mut out = p.clone();
    match kind {
        CorruptionKind::ShuffledLabels => {
            let mut labels: Vec<TokenId> = (0..n).map(|i| p.example(i).1).collect();
            labels.shuffle(&mut rng);
            for (i, y) in labels.into_iter().enumerate() {
                out.tokens[p.spans[i].start + 2] = y;
            }
        }
        CorruptionKind::ExamplesOtherTask => {
            let Donor::Task(task) = donor else {
                return Err(Error::Task("examples_other_task requires a donor task".into()));
            };
            task.check_vocab(vocab)?;
            let inputs = draw(&task.input_space, n, true, &mut rng)?;
            for (i, x) in inputs.into_iter().enumerate() {
                let s = p.spans[i].start;
                out.tokens[s] = x;
                out.tokens[s + 2] = task.apply(x)?;
            }
        }
        CorruptionKind::QueryReplace => {
            let Donor::Task(task) = donor else {
                return Err(Error::Task("query_replace requires a donor task".into()));
            };
            task.check_vocab(vocab)?;
            let current = p.query();
            let x = pick_query(&task.input_space, &[current], &mut rng)?;
            out.tokens[p.query_span().start] = x;
            out.answer = task.apply(x)?;
        }
        CorruptionKind::AmbigKeyPool | CorruptionKind::UnambigKeyPool => {
            let Donor::Pair(pair) = donor else {
                return Err(Error::Task("key-pool corruptions require the ambiguous pair".into()));
            };
            let which = pair.member_named(&p.task).ok_or_else(|| {
                Error::Task(format!("prompt task {} is not a member of the donor pair", p.task))
            })?;
            let task = pair.member(which);
            let (replace, pool, new_flag) = if kind == CorruptionKind::UnambigKeyPool {
                (ExampleFlag::Ambiguous, pair.unambiguous_inputs(), ExampleFlag::Unambiguous)
            } else {
                (ExampleFlag::Unambiguous, pair.ambiguous_inputs.clone(), ExampleFlag::Ambiguous)
            };
            let slots: Vec<usize> = (0..n).filter(|&i| p.example_flags[i] == replace).collect();
            let inputs = draw(&pool, slots.len(), true, &mut rng)?;
            for (&i, x) in slots.iter().zip(inputs) {
                let s = p.spans[i].start;
                out.tokens[s] = x;
                out.tokens[s + 2] = task.apply(x)?;
                out.example_flags[i] = new_flag;
            }
        }
    }
    debug_assert!(out.same_layout(p));
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, prompts: &[Prompt]) -> Result<()> {
    for p in prompts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Prompt>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(20).unwrap()
    }

    #[test]
    fn normal_task_is_seed_deterministic() {
        let v = vocab();
        let a = make_normal_task(&v, 1, 8, 8).unwrap();
        assert_eq!(a, make_normal_task(&v, 1, 8, 8).unwrap());
        let b = make_normal_task(&v, 2, 8, 8).unwrap();
        let differing = a.input_space.iter().filter(|x| a.mapping[x] != b.mapping[x]).count();
        assert!(differing >= 1);
        assert!(make_normal_task(&v, 1, 1, 8).is_err());
        assert!(make_normal_task(&v, 1, 8, 1).is_err());
        assert!(make_normal_task(&v, 1, 21, 8).is_err());
    }

    #[test]
    fn ambiguous_pair_agreement_set_is_exact() {
        let v = vocab();
        let pair = make_ambiguous_pair(&v, 5, 8, 8, 0.5).unwrap();
        assert_eq!(pair.ambiguous_inputs.len(), 4);
        for x in &pair.task_a.input_space {
            let agree = pair.task_a.mapping[x] == pair.task_b.mapping[x];
            assert_eq!(agree, pair.is_ambiguous(*x));
        }
        assert_eq!(make_ambiguous_pair(&v, 5, 6, 8, 1.0 / 3.0).unwrap().ambiguous_inputs.len(), 2);
        assert!(make_ambiguous_pair(&v, 5, 8, 8, 0.1).is_err());
        assert!(make_ambiguous_pair(&v, 5, 8, 8, 1.0).is_err());
        assert_eq!(make_ambiguous_pair(&v, 5, 8, 8, 0.99).unwrap().ambiguous_inputs.len(), 7);
    }

    #[test]
    fn unambiguous_count_rounds_to_nearest() {
        assert_eq!(
            [1, 2, 3, 5, 10].map(unambiguous_count),
            [0, 1, 1, 2, 3]
        );
    }

    #[test]
    fn five_shot_ambiguous_prompt_has_two_unambiguous_at_ex2_ex4() {
        let v = vocab();
        let pair = make_ambiguous_pair(&v, 3, 12, 8, 0.5).unwrap();
        let p = sample_prompt(
            &v,
            PromptSource::Pair(&pair, PairMember::A),
            5,
            PositionalSetting::Setting1,
            11,
            SamplingOptions::default(),
        )
        .unwrap();
        p.validate(&v).unwrap();
        use ExampleFlag::*;
        assert_eq!(p.example_flags, vec![Ambiguous, Unambiguous, Ambiguous, Unambiguous, Ambiguous]);
        for i in 0..5 {
            let (x, y) = p.example(i);
            assert_eq!(y, pair.task_a.mapping[&x]);
            assert_eq!(pair.is_ambiguous(x), p.example_flags[i] == Ambiguous);
        }
        assert!(!pair.is_ambiguous(p.query()));
        assert_eq!(p.answer, pair.task_a.mapping[&p.query()]);
    }

    #[test]
    fn setting2_places_multiples_of_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(unambiguous_slots(10, PositionalSetting::Setting2, &mut rng), vec![2, 5, 8]);
        assert_eq!(unambiguous_slots(5, PositionalSetting::Setting2, &mut rng), vec![2, 4]);
        assert_eq!(unambiguous_slots(3, PositionalSetting::Setting2, &mut rng), vec![2]);
        assert_eq!(unambiguous_slots(10, PositionalSetting::Setting1, &mut rng), vec![1, 3, 5]);
    }

    #[test]
    fn one_shot_normal_prompt_layout() {
        let v = vocab();
        let t = make_normal_task(&v, 4, 8, 8).unwrap();
        let p = sample_prompt(&v, PromptSource::Task(&t), 1, PositionalSetting::Uniform, 0, SamplingOptions::default()).unwrap();
        assert_eq!(p.spans, vec![Span { start: 0, end: 4 }, Span { start: 4, end: 5 }]);
        assert_eq!(p.t_final, 5);
        assert_eq!(p.t_final, p.tokens.len() - 1);
        assert_ne!(p.query(), p.example(0).0);
    }

    #[test]
    fn too_many_shots_without_repeats_fails() {
        let v = vocab();
        let t = make_normal_task(&v, 4, 4, 8).unwrap();
        let opts = SamplingOptions { allow_repeats: false, ..Default::default() };
        assert!(sample_prompt(&v, PromptSource::Task(&t), 5, PositionalSetting::Uniform, 0, opts).is_err());
        assert!(sample_prompt(&v, PromptSource::Task(&t), 4, PositionalSetting::Uniform, 0, opts).is_ok());
    }

    #[test]
    fn corruption_examples() {
        let v = vocab();
        let t = make_normal_task(&v, 4, 12, 8).unwrap();
        let donor = make_normal_task(&v, 9, 12, 8).unwrap();
        let one = sample_prompt(&v, PromptSource::Task(&t), 1, PositionalSetting::Uniform, 2, SamplingOptions::default()).unwrap();
        assert_eq!(corrupt_prompt(&v, &one, CorruptionKind::ShuffledLabels, Donor::None, 3).unwrap(), one);

        let p = sample_prompt(&v, PromptSource::Task(&t), 5, PositionalSetting::Uniform, 2, SamplingOptions::default()).unwrap();
        let q = corrupt_prompt(&v, &p, CorruptionKind::QueryReplace, Donor::Task(&donor), 3).unwrap();
        assert_eq!(q.spans, p.spans);
        let diff: Vec<usize> = (0..p.len()).filter(|&i| p.tokens[i] != q.tokens[i]).collect();
        assert_eq!(diff, vec![p.query_span().start]);

        let e = corrupt_prompt(&v, &p, CorruptionKind::ExamplesOtherTask, Donor::Task(&donor), 3).unwrap();
        assert_eq!(e.len(), p.len());
        assert_eq!(e.query(), p.query());
        for i in 0..5 {
            let (x, y) = e.example(i);
            assert_eq!(donor.mapping[&x], y);
        }
        assert!(corrupt_prompt(&v, &p, CorruptionKind::ExamplesOtherTask, Donor::None, 3).is_err());
    }

    #[test]
    fn key_pools_flip_flagged_examples() {
        let v = vocab();
        let pair = make_ambiguous_pair(&v, 3, 12, 8, 0.5).unwrap();
        let p = sample_prompt(&v, PromptSource::Pair(&pair, PairMember::B), 5, PositionalSetting::Setting1, 4, SamplingOptions::default()).unwrap();
        let d = corrupt_prompt(&v, &p, CorruptionKind::UnambigKeyPool, Donor::Pair(&pair), 8).unwrap();
        assert!(d.example_flags.iter().all(|f| *f == ExampleFlag::Unambiguous));
        for i in 0..5 {
            let (x, y) = d.example(i);
            assert_eq!(y, pair.task_b.mapping[&x]);
            assert!(!pair.is_ambiguous(x));
            if p.example_flags[i] == ExampleFlag::Unambiguous {
                assert_eq!(d.example(i), p.example(i));
            }
        }
        let other = make_ambiguous_pair(&v, 4, 12, 8, 0.5).unwrap();
        assert!(corrupt_prompt(&v, &p, CorruptionKind::AmbigKeyPool, Donor::Pair(&other), 8).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vocab();
        let t = make_normal_task(&v, 4, 12, 8).unwrap();
        let ps: Vec<Prompt> = (0..3)
            .map(|s| sample_prompt(&v, PromptSource::Task(&t), 3, PositionalSetting::Uniform, s, SamplingOptions::default()).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &ps).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), ps);
    }

    proptest! {
        #[test]
        fn generated_prompts_are_valid_and_corruptions_keep_layout(
            seed in 0u64..500,
            n in 1usize..11,
            kind in 0usize..5,
            member in proptest::bool::ANY,
        ) {
            let v = vocab();
            let pair = make_ambiguous_pair(&v, seed % 7, 12, 8, 0.5).unwrap();
            let donor = make_normal_task(&v, seed + 1000, 12, 8).unwrap();
            let which = if member { PairMember::A } else { PairMember::B };
            let setting = [PositionalSetting::Setting1, PositionalSetting::Setting2, PositionalSetting::Uniform][(seed % 3) as usize];
            let p = sample_prompt(&v, PromptSource::Pair(&pair, which), n, setting, seed, SamplingOptions::default()).unwrap();
            p.validate(&v).unwrap();
            let task = pair.member(which);
            for i in 0..n {
                let (x, y) = p.example(i);
                prop_assert_eq!(y, task.mapping[&x]);
                if p.example_flags[i] == ExampleFlag::Unambiguous {
                    prop_assert_ne!(pair.task_a.mapping[&x], pair.task_b.mapping[&x]);
                }
            }
            let kinds = [
                (CorruptionKind::ShuffledLabels, Donor::None),
                (CorruptionKind::ExamplesOtherTask, Donor::Task(&donor)),
                (CorruptionKind::QueryReplace, Donor::Task(&donor)),
                (CorruptionKind::AmbigKeyPool, Donor::Pair(&pair)),
                (CorruptionKind::UnambigKeyPool, Donor::Pair(&pair)),
            ];
            let (k, d) = kinds[kind];
            let c = corrupt_prompt(&v, &p, k, d, seed ^ 77).unwrap();
            prop_assert!(c.same_layout(&p));
            c.validate(&v).unwrap();
        }
    }
}
