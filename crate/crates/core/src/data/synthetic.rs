//! Deterministic toy corpora whose labels are exact by construction.
//!
//! Every skill owns a disjoint set of pseudo-word keywords. Its name is the
//! first two keywords, its description all of them, and its synonym the last
//! two. Sentences mix the owner's keywords with shared noise words and always
//! mention at least one name keyword, so a model has to tell its skills'
//! tokens apart from noise and from each other to rank well.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TitlePairRecord, TrainingPair};
use crate::error::{Error, Result};
use crate::evaluation::{AnnotatedAd, AnnotatedSentence, Cluster, Part, Subset};
use crate::extraction::{Skill, Taxonomy};
use crate::title::TitleBenchmark;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
/// Leading keywords that make up a skill's name.
const NAME_KEYWORDS: usize = 2;

/// The `i`-th pseudo-word: three consonant-vowel syllables, unique per `i`.
pub fn pseudo_word(i: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut n = i;
    let mut out = String::with_capacity(6);
    for _ in 0..3 {
        let s = n % syllables;
        n /= syllables;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    // beyond 70³ words, append a disambiguating counter
    if n > 0 {
        out.push_str(&n.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub skills: usize,
    pub sentences_per_skill: usize,
    /// Distinct pseudo-words in the corpus (keywords plus noise words).
    pub vocab_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub keywords_per_skill: usize,
    pub dev_ads: usize,
    pub test_ads: usize,
    pub sentences_per_ad: usize,
    /// Share of held-out sentences that mention two skills.
    pub two_skill_rate: f64,
    /// Share of held-out sentences with no skill at all.
    pub irrelevant_rate: f64,
    /// Probability that a mention is guaranteed one of its skill's name
    /// keywords; otherwise any of its keywords suffices.
    pub name_mention_rate: f64,
}

impl SyntheticSpec {
    pub fn new(skills: usize, sentences_per_skill: usize, noise_rate: f64, seed: u64) -> Self {
        Self {
            skills,
            sentences_per_skill,
            vocab_size: skills * 4 + 200,
            noise_rate,
            seed,
            keywords_per_skill: 4,
            dev_ads: 20,
            test_ads: 20,
            sentences_per_ad: 5,
            two_skill_rate: 0.2,
            irrelevant_rate: 0.1,
            name_mention_rate: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.skills == 0 || self.sentences_per_skill == 0 || self.sentences_per_ad == 0 {
            return Err(Error::Config("corpus counts must be positive".into()));
        }
        if self.keywords_per_skill < 2 {
            return Err(Error::Config("skills need at least two keywords".into()));
        }
        let rates = [self.noise_rate, self.two_skill_rate, self.irrelevant_rate];
        if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("rates must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.name_mention_rate) {
            return Err(Error::Config("name mention rate must lie in [0, 1]".into()));
        }
        if self.vocab_size <= self.skills * self.keywords_per_skill {
            return Err(Error::Config(format!(
                "vocabulary of {} words cannot hold {} disjoint keywords plus noise",
                self.vocab_size,
                self.skills * self.keywords_per_skill
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    /// Keywords owned by each skill, aligned with the taxonomy.
    pub keywords: Vec<Vec<String>>,
    pub pairs: Vec<TrainingPair>,
    pub dev: Vec<AnnotatedAd>,
    pub test: Vec<AnnotatedAd>,
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    keywords: Vec<Vec<String>>,
    noise: Vec<String>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    /// 4–8 positions; each is noise with the noise rate and otherwise one of
    /// the given keyword sets' words. Every owner ends up with at least one
    /// keyword, and with the name mention rate at least one name keyword.
    fn sentence(&mut self, owners: &[usize]) -> String {
        let len = self.rng.gen_range(4..=8);
        let mut words = Vec::with_capacity(len);
        // owner index per position, None for noise
        let mut slot_owner: Vec<Option<usize>> = Vec::with_capacity(len);
        let mut named = vec![false; owners.len()];
        let mut mentioned = vec![false; owners.len()];
        for i in 0..len {
            if self.rng.gen_bool(self.spec.noise_rate) {
                words.push(self.noise.choose(&mut self.rng).unwrap().clone());
                slot_owner.push(None);
            } else {
                let o = i % owners.len();
                let j = self.rng.gen_range(0..self.spec.keywords_per_skill);
                words.push(self.keywords[owners[o]][j].clone());
                slot_owner.push(Some(o));
                named[o] |= j < NAME_KEYWORDS;
                mentioned[o] = true;
            }
        }
        for (o, &owner) in owners.iter().enumerate() {
            let need_name = self.rng.gen_bool(self.spec.name_mention_rate);
            if named[o] || (mentioned[o] && !need_name) {
                continue;
            }
            let pool = if need_name { NAME_KEYWORDS } else { self.spec.keywords_per_skill };
            let word = self.keywords[owner][self.rng.gen_range(0..pool)].clone();
            // swap out one of the owner's own keywords; with none, replace a
            // word of an all-noise sentence or append
            let own: Vec<usize> = (0..words.len()).filter(|&i| slot_owner[i] == Some(o)).collect();
            let pos = match own.choose(&mut self.rng) {
                Some(&pos) => Some(pos),
                None if slot_owner.iter().all(Option::is_none) => Some(self.rng.gen_range(0..words.len())),
                None => None,
            };
            match pos {
                Some(pos) => {
                    words[pos] = word;
                    slot_owner[pos] = Some(o);
                }
                None => {
                    words.push(word);
                    slot_owner.push(Some(o));
                }
            }
        }
        words.join(" ")
    }

    fn noise_sentence(&mut self) -> String {
        let len = self.rng.gen_range(4..=8);
        (0..len)
            .map(|_| self.noise.choose(&mut self.rng).unwrap().clone())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn ads(&mut self, count: usize, part: Part, ids: &[String]) -> Vec<AnnotatedAd> {
        let tag = match part {
            Part::Dev => "dev",
            Part::Test => "test",
        };
        (0..count)
            .map(|a| {
                let sentences = (0..self.spec.sentences_per_ad)
                    .map(|_| {
                        let roll: f64 = self.rng.gen();
                        if roll < self.spec.irrelevant_rate {
                            return AnnotatedSentence {
                                text: self.noise_sentence(),
                                relevant: false,
                                clusters: vec![],
                            };
                        }
                        let first = self.rng.gen_range(0..self.spec.skills);
                        let mut owners = vec![first];
                        if roll < self.spec.irrelevant_rate + self.spec.two_skill_rate && self.spec.skills > 1 {
                            let second = (first + self.rng.gen_range(1..self.spec.skills)) % self.spec.skills;
                            owners.push(second);
                        }
                        let text = self.sentence(&owners);
                        AnnotatedSentence {
                            text,
                            relevant: true,
                            clusters: owners
                                .iter()
                                .map(|&o| Cluster::from([ids[o].clone()]))
                                .collect(),
                        }
                    })
                    .collect();
                AnnotatedAd {
                    ad_id: format!("{tag}-{a:04}"),
                    split: part,
                    subset: Some(Subset::Random),
                    title: None,
                    sentences,
                }
            })
            .collect()
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let k = spec.keywords_per_skill;
    let keywords: Vec<Vec<String>> = (0..spec.skills)
        .map(|s| (0..k).map(|j| pseudo_word(s * k + j)).collect())
        .collect();
    let noise: Vec<String> = (spec.skills * k..spec.vocab_size).map(pseudo_word).collect();
    let ids: Vec<String> = (0..spec.skills).map(|s| format!("S{s:04}")).collect();

    let skills = (0..spec.skills)
        .map(|s| {
            let kw = &keywords[s];
            Skill {
                id: ids[s].clone(),
                name: kw[..NAME_KEYWORDS].join(" "),
                description: Some(format!("work with {}", kw.join(" "))),
                synonyms: vec![kw[k - NAME_KEYWORDS..].join(" ")],
            }
        })
        .collect();
    let taxonomy = Taxonomy::new(skills)?;

    let mut gen = Generator {
        spec,
        keywords,
        noise,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut pairs = Vec::with_capacity(spec.skills * spec.sentences_per_skill);
    let mut seen = std::collections::HashSet::new();
    for s in 0..spec.skills {
        let mut made = 0;
        let mut attempts = 0;
        while made < spec.sentences_per_skill {
            let sentence = gen.sentence(&[s]);
            attempts += 1;
            if seen.insert((sentence.clone(), s)) {
                pairs.push(TrainingPair {
                    sentence,
                    skill_id: ids[s].clone(),
                });
                made += 1;
            } else if attempts > 100 * spec.sentences_per_skill {
                return Err(Error::Config("cannot generate enough distinct sentences".into()));
            }
        }
    }
    let dev = gen.ads(spec.dev_ads, Part::Dev, &ids);
    let test = gen.ads(spec.test_ads, Part::Test, &ids);
    Ok(SyntheticCorpus {
        taxonomy,
        keywords: gen.keywords,
        pairs,
        dev,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleCorpusSpec {
    pub clusters: usize,
    pub titles_per_cluster: usize,
    pub skills_per_cluster: usize,
    /// Share of each cluster's titles held out as benchmark queries.
    pub held_out: f64,
    pub seed: u64,
}

impl TitleCorpusSpec {
    pub fn new(clusters: usize, titles_per_cluster: usize, seed: u64) -> Self {
        Self {
            clusters,
            titles_per_cluster,
            skills_per_cluster: 12,
            held_out: 0.2,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TitleCorpus {
    pub train: Vec<TitlePairRecord>,
    pub benchmark: TitleBenchmark,
}

const TITLE_MODIFIERS: [&str; 6] = ["senior", "junior", "lead", "assistant", "chief", "trainee"];

/// Each cluster has three title words and a pool of skill names. A title
/// uses two of its cluster's words (sometimes with a shared seniority word);
/// its ad lists 5–10 of the cluster's skills plus occasionally a foreign one.
pub fn generate_title_corpus(spec: &TitleCorpusSpec) -> Result<TitleCorpus> {
    if spec.clusters < 2 || spec.titles_per_cluster < 2 || spec.skills_per_cluster < 5 {
        return Err(Error::Config("title corpus needs ≥2 clusters, ≥2 titles and ≥5 skills each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_word = 0usize;
    let mut word = || {
        next_word += 1;
        pseudo_word(next_word - 1)
    };
    let title_words: Vec<Vec<String>> = (0..spec.clusters).map(|_| (0..3).map(|_| word()).collect()).collect();
    let skill_names: Vec<Vec<String>> = (0..spec.clusters)
        .map(|_| (0..spec.skills_per_cluster).map(|_| format!("{} {}", word(), word())).collect())
        .collect();

    let references: Vec<String> = title_words.iter().map(|w| w.join(" ")).collect();
    let mut train = Vec::new();
    let mut queries = Vec::new();
    let held = ((spec.titles_per_cluster as f64 * spec.held_out).round() as usize).clamp(1, spec.titles_per_cluster - 1);
    for c in 0..spec.clusters {
        for t in 0..spec.titles_per_cluster {
            let mut words: Vec<String> = title_words[c].choose_multiple(&mut rng, 2).cloned().collect();
            if rng.gen_bool(0.5) {
                words.insert(0, TITLE_MODIFIERS.choose(&mut rng).unwrap().to_string());
            }
            let title = words.join(" ");
            if t < held {
                queries.push((title, c));
                continue;
            }
            let count = rng.gen_range(5..=10.min(spec.skills_per_cluster));
            let mut skills: Vec<String> = skill_names[c].choose_multiple(&mut rng, count).cloned().collect();
            if rng.gen_bool(0.2) {
                let other = (c + rng.gen_range(1..spec.clusters)) % spec.clusters;
                skills.push(skill_names[other].choose(&mut rng).unwrap().clone());
            }
            train.push(TitlePairRecord { title, skills });
        }
    }
    train.shuffle(&mut rng);
    Ok(TitleCorpus {
        train,
        benchmark: TitleBenchmark { references, queries },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pseudo_words_are_unique() {
        let words: HashSet<String> = (0..5_000).map(pseudo_word).collect();
        assert_eq!(words.len(), 5_000);
    }

    #[test]
    fn noiseless_sentences_use_only_own_keywords() {
        let mut spec = SyntheticSpec::new(2, 20, 0.0, 3);
        spec.irrelevant_rate = 0.0;
        spec.two_skill_rate = 0.0;
        let c = generate_synthetic_corpus(&spec).unwrap();
        for p in &c.pairs {
            let owner = c.taxonomy.position(&p.skill_id).unwrap();
            assert!(p.sentence.split(' ').all(|w| c.keywords[owner].iter().any(|k| k == w)));
        }
    }

    #[test]
    fn desk_corpus_invariants() {
        let spec = SyntheticSpec::new(50, 10, 0.2, 7);
        let c = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(c.pairs.len(), 500);
        assert_eq!(c.taxonomy.len(), 50);
        let all: HashSet<&String> = c.keywords.iter().flatten().collect();
        assert_eq!(all.len(), 200);
        let unique: HashSet<&TrainingPair> = c.pairs.iter().collect();
        assert_eq!(unique.len(), 500);
        for p in &c.pairs {
            let owner = c.taxonomy.position(&p.skill_id).unwrap();
            assert!(p.sentence.split(' ').any(|w| c.keywords[owner].iter().any(|k| k == w)));
            let n = p.sentence.split(' ').count();
            assert!((4..=8).contains(&n));
        }
        for ad in c.dev.iter().chain(&c.test) {
            for s in &ad.sentences {
                s.validate().unwrap();
                assert_eq!(s.relevant, !s.clusters.is_empty());
                for id in s.gold_labels() {
                    let owner = c.taxonomy.position(&id).unwrap();
                    assert!(s.text.split(' ').any(|w| c.keywords[owner].iter().any(|k| k == w)));
                }
            }
        }
        assert_eq!(generate_synthetic_corpus(&spec).unwrap(), c);
    }

    #[test]
    fn mentions_carry_a_name_keyword() {
        let c = generate_synthetic_corpus(&SyntheticSpec::new(30, 10, 0.5, 4)).unwrap();
        let has_name = |text: &str, owner: usize| text.split(' ').any(|w| c.keywords[owner][..NAME_KEYWORDS].iter().any(|k| k == w));
        for p in &c.pairs {
            assert!(has_name(&p.sentence, c.taxonomy.position(&p.skill_id).unwrap()));
        }
        for s in c.dev.iter().chain(&c.test).flat_map(|a| &a.sentences) {
            for cl in &s.clusters {
                let id = cl.iter().next().unwrap();
                assert!(has_name(&s.text, c.taxonomy.position(id).unwrap()), "{}", s.text);
            }
        }

        let mut spec = SyntheticSpec::new(30, 10, 0.5, 4);
        spec.name_mention_rate = 0.0;
        let c = generate_synthetic_corpus(&spec).unwrap();
        let nameless = c
            .pairs
            .iter()
            .filter(|p| {
                let owner = c.taxonomy.position(&p.skill_id).unwrap();
                !p.sentence.split(' ').any(|w| c.keywords[owner][..NAME_KEYWORDS].iter().any(|k| k == w))
            })
            .count();
        assert!(nameless > 0);
        spec.name_mention_rate = 1.5;
        assert!(generate_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn rejects_small_vocabulary() {
        let mut spec = SyntheticSpec::new(10, 2, 0.1, 1);
        spec.vocab_size = 40;
        assert!(generate_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn title_corpus_shape() {
        let c = generate_title_corpus(&TitleCorpusSpec::new(20, 50, 3)).unwrap();
        assert_eq!(c.benchmark.references.len(), 20);
        assert_eq!(c.benchmark.queries.len(), 200);
        assert_eq!(c.train.len(), 800);
        assert!(c.train.iter().all(|p| p.skills.len() >= 5));
        assert_eq!(generate_title_corpus(&TitleCorpusSpec::new(20, 50, 3)).unwrap(), c);
    }
}
