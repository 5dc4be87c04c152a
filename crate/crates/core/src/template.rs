//! Fixed-template sentence rendering for semantic quadruples, seeded template
//! selection and the inverse parser.
//!
//! Five templates are available. Each is a sequence of pieces: literal
//! scaffolding, the noun phrase (`[quantity] [type] [category]`), an optional
//! location phrase and, for two templates, an `is`/`are` verb that agrees with
//! the quantity. Rendering and parsing are both driven by the same piece
//! tables so the two directions cannot drift apart.
//!
//! Attribute omission rules:
//! - a dropped location removes the whole prepositional phrase around it;
//! - a dropped quantity, type or category removes just that phrase from the
//!   noun phrase;
//! - when all three noun-phrase attributes are dropped, the noun phrase is
//!   the placeholder `changes`;
//! - the verb is `is` only when the quantity is rendered and is `a single`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Direction, Quantity, SemanticQuadruple, TextDescription};

/// Sentence used for samples without any change class.
pub const NO_CHANGE_SENTENCE: &str = "The scene shows no change.";

/// Noun phrase used when quantity, type and category are all dropped.
pub const PLACEHOLDER_NOUN: &str = "changes";

pub const TEMPLATE_COUNT: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Text(&'static str),
    NounPhrase,
    Verb,
    Location {
        before: &'static str,
        after: &'static str,
    },
}

use Piece::{Location, NounPhrase, Text, Verb};

const TEMPLATES: [&[Piece]; 5] = [
    &[
        Text("The scene shows "),
        NounPhrase,
        Location {
            before: " in the ",
            after: "",
        },
        Text("."),
    ],
    &[
        Text("Observing "),
        NounPhrase,
        Location {
            before: " towards the ",
            after: "",
        },
        Text("."),
    ],
    &[
        NounPhrase,
        Location {
            before: " located in the ",
            after: "",
        },
        Text("."),
    ],
    &[
        Location {
            before: "In the ",
            after: ", ",
        },
        NounPhrase,
        Text(" "),
        Verb,
        Text(" visible."),
    ],
    &[
        Text("There "),
        Verb,
        Text(" "),
        NounPhrase,
        Location {
            before: " in the ",
            after: " region",
        },
    ],
];

/// Variant used by template 1 when the location is the image center. It reads
/// the same as template 1 with `center` substituted; kept as its own table so
/// the center rule stays explicit.
const NEUTRAL_CENTER: &[Piece] = &[
    Text("The scene shows "),
    NounPhrase,
    Location {
        before: " in the ",
        after: "",
    },
    Text("."),
];

/// Which quadruple attributes appear in rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSelection {
    pub use_quantity: bool,
    pub use_type: bool,
    pub use_category: bool,
    pub use_location: bool,
}

impl Default for AttributeSelection {
    fn default() -> Self {
        Self::ALL
    }
}

impl AttributeSelection {
    pub const ALL: Self = Self {
        use_quantity: true,
        use_type: true,
        use_category: true,
        use_location: true,
    };
    pub const NONE: Self = Self {
        use_quantity: false,
        use_type: false,
        use_category: false,
        use_location: false,
    };

    pub fn new(quantity: bool, change_type: bool, category: bool, location: bool) -> Self {
        Self {
            use_quantity: quantity,
            use_type: change_type,
            use_category: category,
            use_location: location,
        }
    }

    /// Parses a comma-separated attribute list such as `type,category`.
    /// `all` and `none` are accepted as shorthands.
    pub fn parse_list(list: &str) -> Result<Self> {
        let list = list.trim();
        match list {
            "all" => return Ok(Self::ALL),
            "none" | "" => return Ok(Self::NONE),
            _ => {}
        }
        let mut sel = Self::NONE;
        for item in list.split(',').map(str::trim) {
            let flag = match item {
                "quantity" => &mut sel.use_quantity,
                "type" => &mut sel.use_type,
                "category" => &mut sel.use_category,
                "location" => &mut sel.use_location,
                other => {
                    return Err(Error::Config(format!(
                        "unknown attribute {other:?} (expected quantity, type, category, location)"
                    )))
                }
            };
            if *flag {
                return Err(Error::Config(format!("attribute {item:?} listed twice")));
            }
            *flag = true;
        }
        Ok(sel)
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    /// All sixteen subsets, in binary counting order over
    /// (quantity, type, category, location).
    pub fn all_subsets() -> impl Iterator<Item = Self> {
        (0u8..16).map(|bits| Self::new(bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0))
    }

    pub fn to_list(&self) -> String {
        let names = [
            (self.use_quantity, "quantity"),
            (self.use_type, "type"),
            (self.use_category, "category"),
            (self.use_location, "location"),
        ];
        let picked: Vec<&str> = names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if picked.is_empty() {
            "none".to_string()
        } else {
            picked.join(",")
        }
    }
}

/// Category and change-type phrases known to the parser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<String>,
    pub change_types: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let categories = [
            "buildings",
            "building",
            "refugee camp",
            "agricultural land",
            "greenhouse",
            "greenhouse destroyed",
            "greenhouse newly built",
        ];
        let types = ["destroyed", "newly built", "newly established"];
        Self {
            categories: categories.iter().map(|s| s.to_string()).collect(),
            change_types: types.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    pub fn new(categories: Vec<String>, change_types: Vec<String>) -> Result<Self> {
        let v = Self {
            categories,
            change_types,
        };
        v.validate()?;
        Ok(v)
    }

    /// Phrases must be non-empty lowercase-friendly word sequences separated by
    /// single spaces, free of sentence punctuation, unique across both lists
    /// and distinct from quantity and direction words.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let reserved: HashSet<&str> = Quantity::ALL
            .iter()
            .map(|q| q.as_str())
            .chain(Direction::ALL.iter().map(|d| d.as_str()))
            .chain([PLACEHOLDER_NOUN, "no change"])
            .collect();
        for phrase in self.categories.iter().chain(&self.change_types) {
            let well_formed = !phrase.is_empty()
                && phrase.split(' ').all(|w| !w.is_empty())
                && !phrase
                    .chars()
                    .any(|c| matches!(c, '.' | ',' | '\t' | '\n' | '\r'));
            if !well_formed {
                return Err(Error::InvalidVocabulary(format!(
                    "malformed phrase {phrase:?}"
                )));
            }
            if reserved.contains(phrase.as_str()) {
                return Err(Error::InvalidVocabulary(format!(
                    "reserved phrase {phrase:?}"
                )));
            }
            if !seen.insert(phrase.as_str()) {
                return Err(Error::InvalidVocabulary(format!(
                    "duplicate phrase {phrase:?}"
                )));
            }
        }
        Ok(())
    }

    /// Adds phrases not already present.
    pub fn extend(&mut self, categories: &[String], change_types: &[String]) {
        for c in categories {
            if !self.categories.contains(c) {
                self.categories.push(c.clone());
            }
        }
        for t in change_types {
            if !self.change_types.contains(t) {
                self.change_types.push(t.clone());
            }
        }
    }

    /// Every word that may appear in a rendered sentence.
    pub fn words(&self) -> HashSet<String> {
        let scaffold = TEMPLATES
            .iter()
            .flat_map(|t| t.iter())
            .flat_map(|p| match p {
                Text(s) => vec![*s],
                Location { before, after } => vec![*before, *after],
                Verb => vec!["is", "are"],
                NounPhrase => vec![],
            })
            .chain(Quantity::ALL.iter().map(|q| q.as_str()))
            .chain(Direction::ALL.iter().map(|d| d.as_str()))
            .chain([PLACEHOLDER_NOUN, NO_CHANGE_SENTENCE])
            .flat_map(|s| s.split_whitespace())
            .map(str::to_string);
        self.categories
            .iter()
            .chain(&self.change_types)
            .flat_map(|p| p.split_whitespace().map(str::to_string))
            .chain(scaffold)
            .map(|w| w.trim_end_matches([',', '.']).to_string())
            .collect()
    }
}

fn template_pieces(template_id: u8, location: Option<Direction>) -> Result<&'static [Piece]> {
    if !(1..=TEMPLATE_COUNT).contains(&template_id) {
        return Err(Error::InvalidTemplate(template_id));
    }
    if template_id == 1 && location == Some(Direction::Center) {
        return Ok(NEUTRAL_CENTER);
    }
    Ok(TEMPLATES[template_id as usize - 1])
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn decapitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn verb_for(quantity: Option<Quantity>) -> &'static str {
    match quantity {
        Some(q) if q.is_singular() => "is",
        _ => "are",
    }
}

fn noun_phrase(
    quantity: Option<Quantity>,
    change_type: Option<&str>,
    category: Option<&str>,
) -> String {
    let words: Vec<&str> = [quantity.map(Quantity::as_str), change_type, category]
        .into_iter()
        .flatten()
        .collect();
    if words.is_empty() {
        PLACEHOLDER_NOUN.to_string()
    } else {
        words.join(" ")
    }
}

/// Renders one quadruple with the given template. `rng_seed_used` is left at
/// zero; [`describe`] records the seed that picked the template.
pub fn render(
    quadruple: &SemanticQuadruple,
    template_id: u8,
    attrs: &AttributeSelection,
) -> Result<TextDescription> {
    let quantity = attrs.use_quantity.then_some(quadruple.quantity);
    let change_type = attrs.use_type.then_some(quadruple.change_type.as_str());
    let category = attrs.use_category.then_some(quadruple.category.as_str());
    let location = attrs.use_location.then_some(quadruple.location);

    let mut sentence = String::new();
    for piece in template_pieces(template_id, location)? {
        match *piece {
            Text(s) => sentence.push_str(s),
            NounPhrase => sentence.push_str(&noun_phrase(quantity, change_type, category)),
            Verb => sentence.push_str(verb_for(quantity)),
            Location { before, after } => {
                if let Some(d) = location {
                    sentence.push_str(before);
                    sentence.push_str(d.as_str());
                    sentence.push_str(after);
                }
            }
        }
    }
    Ok(TextDescription {
        sentence: capitalize_first(&sentence),
        template_id,
        quadruple: quadruple.clone(),
        rng_seed_used: 0,
    })
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic template draw for one class of one sample:
/// `1 + splitmix64(seed ^ fnv1a64(image_id) ^ class_index) mod 5`.
pub fn select_template(seed: u64, image_id: &str, class_index: u16) -> u8 {
    let folded = seed ^ fnv1a64(image_id.as_bytes()) ^ class_index as u64;
    1 + (splitmix64(folded) % TEMPLATE_COUNT as u64) as u8
}

/// Selects a template for `quadruple` and renders it, recording the seed.
pub fn describe(
    quadruple: &SemanticQuadruple,
    seed: u64,
    image_id: &str,
    class_index: u16,
    attrs: &AttributeSelection,
) -> TextDescription {
    let id = select_template(seed, image_id, class_index);
    let mut text = render(quadruple, id, attrs).expect("selected id is always in range");
    text.rng_seed_used = seed;
    text
}

/// Joins per-class sentences into a sample description. Sentences without
/// closing punctuation (template 5) get a period so they do not run together.
pub fn join_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> String {
    let joined = sentences
        .into_iter()
        .map(|s| {
            if s.ends_with('.') {
                s.to_string()
            } else {
                format!("{s}.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    if joined.is_empty() {
        NO_CHANGE_SENTENCE.to_string()
    } else {
        joined
    }
}

/// Fields recovered from a rendered sentence. Attributes that were not
/// rendered come back as `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedDescription {
    pub template_id: u8,
    pub quantity: Option<Quantity>,
    pub change_type: Option<String>,
    pub category: Option<String>,
    pub location: Option<Direction>,
    /// Set for the fixed no-change sentence.
    pub no_change: bool,
}

#[derive(Debug, Clone, Default)]
struct MatchState {
    quantity: Option<Quantity>,
    change_type: Option<String>,
    category: Option<String>,
    location: Option<Direction>,
    verb: Option<&'static str>,
}

/// Parser for the template grammar over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct DescriptionParser {
    categories: Vec<String>,
    change_types: Vec<String>,
}

impl DescriptionParser {
    pub fn new(vocabulary: &Vocabulary) -> Result<Self> {
        vocabulary.validate()?;
        Ok(Self {
            categories: vocabulary.categories.clone(),
            change_types: vocabulary.change_types.clone(),
        })
    }

    pub fn parse(&self, sentence: &str) -> Result<ParsedDescription> {
        if sentence == NO_CHANGE_SENTENCE {
            return Ok(ParsedDescription {
                template_id: 1,
                quantity: None,
                change_type: None,
                category: None,
                location: None,
                no_change: true,
            });
        }
        let mut furthest = 0;
        // rendered sentences always start with a capital letter; templates
        // that open with the noun phrase match against the decapitalized form
        let first_lower = sentence.chars().next().is_some_and(char::is_lowercase);
        let variants: Vec<String> = if first_lower {
            Vec::new()
        } else {
            vec![sentence.to_string(), decapitalize_first(sentence)]
        };
        for variant in &variants {
            for (i, pieces) in TEMPLATES.iter().enumerate() {
                if let Some(state) =
                    self.match_pieces(pieces, variant, 0, MatchState::default(), &mut furthest)
                {
                    return Ok(ParsedDescription {
                        template_id: i as u8 + 1,
                        quantity: state.quantity,
                        change_type: state.change_type,
                        category: state.category,
                        location: state.location,
                        no_change: false,
                    });
                }
            }
        }
        Err(Error::ParseFailure {
            position: furthest,
            sentence: sentence.to_string(),
        })
    }

    fn match_pieces(
        &self,
        pieces: &[Piece],
        s: &str,
        pos: usize,
        state: MatchState,
        furthest: &mut usize,
    ) -> Option<MatchState> {
        *furthest = (*furthest).max(pos);
        let Some((piece, rest)) = pieces.split_first() else {
            if pos != s.len() {
                return None;
            }
            // agreement is checked once the whole sentence is known
            return match state.verb {
                Some(v) if v != verb_for(state.quantity) => None,
                _ => Some(state),
            };
        };
        let tail = &s[pos..];
        match *piece {
            Text(lit) => {
                if tail.starts_with(lit) {
                    self.match_pieces(rest, s, pos + lit.len(), state, furthest)
                } else {
                    *furthest = (*furthest).max(pos + common_prefix(tail, lit));
                    None
                }
            }
            Verb => ["is", "are"].into_iter().find_map(|v| {
                if !tail.starts_with(v) {
                    return None;
                }
                let next = MatchState {
                    verb: Some(v),
                    ..state.clone()
                };
                self.match_pieces(rest, s, pos + v.len(), next, furthest)
            }),
            Location { before, after } => {
                if let Some(after_before) = tail.strip_prefix(before) {
                    let base = pos + before.len();
                    for d in Direction::ALL {
                        let Some(after_dir) = after_before.strip_prefix(d.as_str()) else {
                            continue;
                        };
                        if after_dir.starts_with(after) {
                            let next = MatchState {
                                location: Some(d),
                                ..state.clone()
                            };
                            let end = base + d.as_str().len() + after.len();
                            if let Some(done) = self.match_pieces(rest, s, end, next, furthest) {
                                return Some(done);
                            }
                        }
                    }
                }
                self.match_pieces(rest, s, pos, state, furthest)
            }
            NounPhrase => {
                // shortest noun phrase first so trailing phrases stay available
                let ends = (pos + 1..=s.len()).filter(|&e| s.is_char_boundary(e));
                for end in ends {
                    let Some((quantity, change_type, category)) =
                        self.parse_noun_phrase(&s[pos..end])
                    else {
                        continue;
                    };
                    let next = MatchState {
                        quantity,
                        change_type,
                        category,
                        ..state.clone()
                    };
                    if let Some(done) = self.match_pieces(rest, s, end, next, furthest) {
                        return Some(done);
                    }
                }
                None
            }
        }
    }

    /// Splits `[quantity] [type] [category]` where each part is optional.
    /// Among several readings the one with the longest category wins, then
    /// the longest type.
    #[allow(clippy::type_complexity)]
    fn parse_noun_phrase(
        &self,
        phrase: &str,
    ) -> Option<(Option<Quantity>, Option<String>, Option<String>)> {
        if phrase == PLACEHOLDER_NOUN {
            return Some((None, None, None));
        }
        let mut best: Option<(Option<Quantity>, Option<&str>, Option<&str>)> = None;
        let quantities = std::iter::once(None).chain(Quantity::ALL.into_iter().map(Some));
        for q in quantities {
            let Some(after_q) = take_phrase(phrase, q.map(Quantity::as_str)) else {
                continue;
            };
            let types =
                std::iter::once(None).chain(self.change_types.iter().map(|t| Some(t.as_str())));
            for t in types {
                let Some(after_t) = take_phrase(after_q, t) else {
                    continue;
                };
                let cats =
                    std::iter::once(None).chain(self.categories.iter().map(|c| Some(c.as_str())));
                for c in cats {
                    if q.is_none() && t.is_none() && c.is_none() {
                        continue;
                    }
                    if take_phrase(after_t, c) != Some("") {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((_, bt, bc)) => {
                            let key = (c.map_or(0, str::len), t.map_or(0, str::len));
                            key > (bc.map_or(0, str::len), bt.map_or(0, str::len))
                        }
                    };
                    if better {
                        best = Some((q, t, c));
                    }
                }
            }
        }
        best.map(|(q, t, c)| (q, t.map(str::to_string), c.map(str::to_string)))
    }
}

/// Consumes `word` (if any) from the front of `s`, along with the single
/// separating space when more text follows.
fn take_phrase<'a>(s: &'a str, word: Option<&str>) -> Option<&'a str> {
    let Some(word) = word else { return Some(s) };
    let rest = s.strip_prefix(word)?;
    if rest.is_empty() {
        Some(rest)
    } else {
        rest.strip_prefix(' ')
    }
}

fn common_prefix(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

/// Parses with the default vocabulary.
pub fn parse_description(sentence: &str) -> Result<ParsedDescription> {
    DescriptionParser::new(&Vocabulary::default())?.parse(sentence)
}
