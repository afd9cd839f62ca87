use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::PipelineError;
use crate::hashing::{sha256_hex, unit};
use crate::model::{corpus_digest, read_records, write_records, ImageSample, Locale, PromptGroup, Theme};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const GROUPS_FILE: &str = "groups.jsonl";

/// Images and the prompt groups they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<ImageSample>,
    pub groups: Vec<PromptGroup>,
}

impl Corpus {
    pub fn new(samples: Vec<ImageSample>, groups: Vec<PromptGroup>) -> Result<Self, PipelineError> {
        let corpus = Corpus { samples, groups };
        corpus.check()?;
        Ok(corpus)
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let samples = read_records(&dir.join(SAMPLES_FILE))?;
        let groups = read_records(&dir.join(GROUPS_FILE))?;
        Self::new(samples, groups)
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        write_records(&dir.join(SAMPLES_FILE), &self.samples)?;
        write_records(&dir.join(GROUPS_FILE), &self.groups)?;
        Ok(())
    }

    fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Corpus(m));
        let mut by_id: HashMap<&str, &ImageSample> = HashMap::new();
        for s in &self.samples {
            if by_id.insert(&s.sample_id, s).is_some() {
                return bad(format!("sample `{}` appears twice", s.sample_id));
            }
        }
        let mut seen_groups = HashMap::new();
        for g in &self.groups {
            if seen_groups.insert(&g.group_id, ()).is_some() {
                return bad(format!("group `{}` appears twice", g.group_id));
            }
            let mut theme = None;
            for id in &g.sample_ids {
                let Some(s) = by_id.get(id.as_str()) else {
                    return bad(format!("group `{}` lists unknown sample `{id}`", g.group_id));
                };
                if s.group_id != g.group_id {
                    return bad(format!(
                        "sample `{id}` belongs to `{}`, not `{}`",
                        s.group_id, g.group_id
                    ));
                }
                if *theme.get_or_insert(s.theme) != s.theme {
                    return bad(format!("group `{}` mixes themes", g.group_id));
                }
            }
        }
        Ok(())
    }

    /// Digest over samples and groups in file order.
    pub fn digest(&self) -> Result<String, PipelineError> {
        let s = corpus_digest(&self.samples)?;
        let g = corpus_digest(&self.groups)?;
        Ok(sha256_hex(format!("{s}\n{g}").as_bytes()))
    }

    /// Groups of `theme` with their samples in `sample_ids` order.
    pub fn groups_of(&self, theme: Theme) -> Vec<(&PromptGroup, Vec<ImageSample>)> {
        let by_id: HashMap<&str, &ImageSample> = self.samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        self.groups
            .iter()
            .filter_map(|g| {
                let samples: Vec<ImageSample> = g.sample_ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
                (samples.first()?.theme == theme).then_some((g, samples))
            })
            .collect()
    }
}

const CINEMATIC_SUBJECTS: [&str; 6] = [
    "a rain-soaked neon alley at midnight",
    "a lone astronaut crossing red dunes",
    "a lighthouse keeper facing a storm",
    "two rivals on a frozen bridge",
    "a jazz club in 1950s Harlem",
    "a detective under a flickering streetlamp",
];

const ZH_SUBJECTS: [&str; 4] = ["雨夜霓虹小巷", "沙漠中的宇航员", "暴风雨中的灯塔", "古城门前的侠客"];

const DESIGNS: [&str; 5] = [
    "a spring tea festival",
    "a jazz concert series",
    "a minimalist running shoe launch",
    "a science museum open day",
    "a ramen shop anniversary sale",
];

const NONCINEMATIC_FORMATS: [&str; 4] = ["poster", "social media banner", "flyer", "event ticket"];

const DIMENSIONS: [(u32, u32); 3] = [(1024, 1024), (768, 1024), (1024, 768)];

/// Reference corpus for desk runs: 60 cinematic groups of 6 images (36
/// English, 24 Chinese) and 40 non-cinematic groups of 4. Non-cinematic
/// images mostly share their group's size; a few reuse another image's
/// locator.
pub fn synthetic_corpus(seed: u64) -> Corpus {
    let mut samples = Vec::new();
    let mut groups = Vec::new();
    let generators = ["gen-a", "gen-b", "gen-c"];

    for g in 0..60 {
        let locale = if g < 36 { Locale::En } else { Locale::Zh };
        let group_id = format!("cin-{g:03}");
        let prompt_text = match locale {
            Locale::En => format!(
                "Movie poster, {}, title text \"CHAPTER {}\", dramatic lighting",
                CINEMATIC_SUBJECTS[g % CINEMATIC_SUBJECTS.len()],
                g + 1
            ),
            Locale::Zh => format!(
                "电影海报,{},标题「第{}章」,戏剧性光影",
                ZH_SUBJECTS[g % ZH_SUBJECTS.len()],
                g + 1
            ),
        };
        let ids = push_group(&mut samples, &group_id, locale, Theme::Cinematic, 6, |i| {
            (format!("synth://{group_id}/{i}"), (1024, 1024), generators[i % 3])
        });
        groups.push(PromptGroup {
            group_id,
            prompt_text,
            locale,
            sample_ids: ids,
        });
    }

    for g in 0..40 {
        let group_id = format!("gd-{g:03}");
        let prompt_text = format!(
            "A {} for {}, headline in bold sans-serif",
            NONCINEMATIC_FORMATS[g % NONCINEMATIC_FORMATS.len()],
            DESIGNS[g % DESIGNS.len()]
        );
        let key = group_id.clone();
        let base = DIMENSIONS[(unit(seed, &["synth-size", &key]) * 3.0) as usize];
        let ids = push_group(&mut samples, &group_id, Locale::En, Theme::NonCinematic, 4, |i| {
            let i_str = i.to_string();
            let dims = if unit(seed, &["synth-resize", &key, &i_str]) < 0.2 {
                DIMENSIONS[(unit(seed, &["synth-alt", &key, &i_str]) * 3.0) as usize]
            } else {
                base
            };
            let uri = if i == 3 && unit(seed, &["synth-dup", &key]) < 0.1 {
                format!("synth://{key}/0")
            } else {
                format!("synth://{key}/{i}")
            };
            (uri, dims, generators[(i + g) % 3])
        });
        groups.push(PromptGroup {
            group_id,
            prompt_text,
            locale: Locale::En,
            sample_ids: ids,
        });
    }

    Corpus { samples, groups }
}

fn push_group(
    samples: &mut Vec<ImageSample>,
    group_id: &str,
    locale: Locale,
    theme: Theme,
    m: usize,
    image: impl Fn(usize) -> (String, (u32, u32), &'static str),
) -> Vec<String> {
    (0..m)
        .map(|i| {
            let (uri, (width, height), source) = image(i);
            let sample_id = format!("{group_id}-{i}");
            samples.push(ImageSample {
                sample_id: sample_id.clone(),
                group_id: group_id.to_string(),
                locale,
                uri,
                width,
                height,
                source_tag: source.to_string(),
                theme,
            });
            sample_id
        })
        .collect()
}

/// Per-locale and per-theme group counts, for reporting.
pub fn group_census(corpus: &Corpus) -> BTreeMap<String, usize> {
    let mut census = BTreeMap::new();
    for theme in [Theme::Cinematic, Theme::NonCinematic] {
        for (g, _) in corpus.groups_of(theme) {
            let key = format!(
                "{}/{}",
                if theme == Theme::Cinematic {
                    "cinematic"
                } else {
                    "noncinematic"
                },
                g.locale.as_str()
            );
            *census.entry(key).or_default() += 1;
        }
    }
    census
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shape() {
        let c = synthetic_corpus(42);
        assert_eq!(c.samples.len(), 60 * 6 + 40 * 4);
        let census = group_census(&c);
        assert_eq!(census["cinematic/en"], 36);
        assert_eq!(census["cinematic/zh"], 24);
        assert_eq!(census["noncinematic/en"], 40);
        c.check().unwrap();
    }

    #[test]
    fn synthetic_is_seeded() {
        assert_eq!(synthetic_corpus(1), synthetic_corpus(1));
        assert_ne!(
            synthetic_corpus(1).digest().unwrap(),
            synthetic_corpus(2).digest().unwrap()
        );
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = synthetic_corpus(3);
        c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn dangling_sample_reference_is_rejected() {
        let mut c = synthetic_corpus(3);
        c.groups[0].sample_ids[0] = "nope".into();
        assert!(matches!(Corpus::new(c.samples, c.groups), Err(PipelineError::Corpus(m)) if m.contains("nope")));
    }
}
