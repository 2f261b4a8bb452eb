//! Reader-study decks and blinded, one-way rating sessions.
//!
//! A session only ever exposes [`PublicItem`]s and [`SessionView`]s to the
//! rater; the true source of an item appears in the export, which is
//! available once every item has been judged.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ReaderResponse, Source};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeckItem {
    pub item_id: String,
    /// Image path, relative to the deck file.
    pub image: String,
    pub true_source: Source,
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deck {
    pub deck_id: String,
    pub seed: u64,
    pub n_per_class: usize,
    /// Items in display order.
    pub items: Vec<DeckItem>,
}

/// Rater-facing projection of a deck item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicItem {
    pub item_id: String,
    pub order: usize,
}

/// Pick `n_per_class` images from each pool and shuffle them together.
/// Pools are sorted first, so the result depends only on their contents and `seed`.
pub fn build_deck(real: &[String], synthetic: &[String], n_per_class: usize, seed: u64) -> Result<Deck> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(2 * n_per_class);
    for (pool, source, class) in [(real, Source::RealFfpe, "real_ffpe"), (synthetic, Source::AiFfpe, "ai_ffpe")] {
        let mut sorted: Vec<&String> = pool.iter().collect();
        sorted.sort();
        sorted.dedup();
        if sorted.len() < n_per_class {
            return Err(Error::InsufficientPatches { class, needed: n_per_class, found: sorted.len() });
        }
        let mut picks = index::sample(&mut rng, sorted.len(), n_per_class).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|i| (sorted[i].clone(), source)));
    }
    chosen.shuffle(&mut rng);
    let width = format!("{}", chosen.len()).len().max(2);
    let items = chosen
        .into_iter()
        .enumerate()
        .map(|(order, (image, true_source))| DeckItem {
            item_id: format!("item-{:0width$}", order + 1),
            image,
            true_source,
            order,
        })
        .collect();
    let deck = Deck { deck_id: format!("deck-{seed}-{n_per_class}"), seed, n_per_class, items };
    deck.validate()?;
    Ok(deck)
}

impl Deck {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Survey("deck has no items".into()));
        }
        let mut ids = BTreeSet::new();
        let mut counts = [0usize; 2];
        for (i, item) in self.items.iter().enumerate() {
            if item.order != i {
                return Err(Error::Survey(format!("item {} has order {}, expected {i}", item.item_id, item.order)));
            }
            if item.item_id.is_empty() || !ids.insert(item.item_id.as_str()) {
                return Err(Error::Survey(format!("duplicate or empty item id `{}`", item.item_id)));
            }
            counts[item.true_source as usize] += 1;
        }
        if counts[0] != counts[1] {
            return Err(Error::Survey(format!("unbalanced deck: {} real_ffpe, {} ai_ffpe", counts[0], counts[1])));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, item_id: &str) -> Option<&DeckItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn public_items(&self) -> Vec<PublicItem> {
        self.items.iter().map(|i| PublicItem { item_id: i.item_id.clone(), order: i.order }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub item_id: String,
    pub judged_source: Source,
    #[serde(rename = "timestamp_iso8601")]
    pub timestamp: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub rater_id: String,
    pub deck_id: String,
    pub cursor: usize,
    pub judgments: Vec<Judgment>,
}

/// What the rater may see about a session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub rater_id: String,
    pub cursor: usize,
    pub total: usize,
    pub complete: bool,
    pub current: Option<PublicItem>,
}

impl Session {
    pub fn start(deck: &Deck, session_id: impl Into<String>, rater_id: impl Into<String>) -> Result<Self> {
        deck.validate()?;
        let (session_id, rater_id) = (session_id.into(), rater_id.into());
        if rater_id.trim().is_empty() {
            return Err(Error::Survey("rater_id must not be empty".into()));
        }
        if session_id.trim().is_empty() {
            return Err(Error::Survey("session_id must not be empty".into()));
        }
        Ok(Self { session_id, rater_id, deck_id: deck.deck_id.clone(), cursor: 0, judgments: Vec::new() })
    }

    pub fn is_complete(&self, deck: &Deck) -> bool {
        self.cursor == deck.len()
    }

    pub fn view(&self, deck: &Deck) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            rater_id: self.rater_id.clone(),
            cursor: self.cursor,
            total: deck.len(),
            complete: self.is_complete(deck),
            current: deck.items.get(self.cursor).map(|i| PublicItem { item_id: i.item_id.clone(), order: i.order }),
        }
    }

    /// Record a judgment for the item under the cursor. Anything else is
    /// rejected and leaves the session untouched.
    pub fn submit(&mut self, deck: &Deck, judgment: Judgment) -> Result<()> {
        if deck.deck_id != self.deck_id {
            return Err(Error::Survey(format!("session {} belongs to deck {}", self.session_id, self.deck_id)));
        }
        let Some(current) = deck.items.get(self.cursor) else {
            return Err(Error::Survey("session already complete".into()));
        };
        if judgment.item_id != current.item_id {
            let answered = self.judgments.iter().any(|j| j.item_id == judgment.item_id);
            return Err(Error::Survey(if answered {
                format!("item {} already answered", judgment.item_id)
            } else {
                format!("expected a judgment for {}, got {}", current.item_id, judgment.item_id)
            }));
        }
        if let Some(last) = self.judgments.last() {
            if judgment.timestamp < last.timestamp {
                return Err(Error::Survey(format!(
                    "timestamp {} precedes previous judgment at {}",
                    judgment.timestamp, last.timestamp
                )));
            }
        }
        self.judgments.push(judgment);
        self.cursor += 1;
        Ok(())
    }

    /// Responses with their true sources, once every item is judged.
    pub fn export(&self, deck: &Deck) -> Result<Vec<ReaderResponse>> {
        if !self.is_complete(deck) {
            return Err(Error::Survey(format!(
                "session incomplete: {} of {} items remaining",
                deck.len() - self.cursor,
                deck.len()
            )));
        }
        Ok(self
            .judgments
            .iter()
            .zip(&deck.items)
            .map(|(j, item)| ReaderResponse {
                rater_id: self.rater_id.clone(),
                item_id: item.item_id.clone(),
                true_source: item.true_source,
                judged_source: j.judged_source,
                timestamp: j.timestamp.clone(),
            })
            .collect())
    }
}

/// One line of the append-only survey log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SurveyEvent {
    Start { session_id: String, rater_id: String },
    Judgment { session_id: String, judgment: Judgment },
}

/// All sessions on one deck. Every accepted state change is returned as an
/// event so callers can persist it before acknowledging.
#[derive(Clone, Debug, PartialEq)]
pub struct SurveyBook {
    pub deck: Deck,
    sessions: BTreeMap<String, Session>,
}

impl SurveyBook {
    pub fn new(deck: Deck) -> Result<Self> {
        deck.validate()?;
        Ok(Self { deck, sessions: BTreeMap::new() })
    }

    /// Rebuild state from a log. Events that fail to apply are reported.
    pub fn replay<I: IntoIterator<Item = SurveyEvent>>(deck: Deck, events: I) -> Result<Self> {
        let mut book = Self::new(deck)?;
        for (line, e) in events.into_iter().enumerate() {
            book.apply(&e).map_err(|err| Error::Survey(format!("log event {}: {err}", line + 1)))?;
        }
        Ok(book)
    }

    pub fn session(&self, session_id: &str) -> Result<&Session> {
        self.sessions.get(session_id).ok_or_else(|| Error::Survey(format!("unknown session `{session_id}`")))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn apply(&mut self, event: &SurveyEvent) -> Result<()> {
        match event {
            SurveyEvent::Start { session_id, rater_id } => {
                if self.sessions.contains_key(session_id) {
                    return Err(Error::Survey(format!("session `{session_id}` already exists")));
                }
                let s = Session::start(&self.deck, session_id.clone(), rater_id.clone())?;
                self.sessions.insert(session_id.clone(), s);
            }
            SurveyEvent::Judgment { session_id, judgment } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| Error::Survey(format!("unknown session `{session_id}`")))?;
                s.submit(&self.deck, judgment.clone())?;
            }
        }
        Ok(())
    }

    /// Validate and apply; the returned event is what should be logged.
    pub fn start(&mut self, session_id: &str, rater_id: &str) -> Result<SurveyEvent> {
        let e = SurveyEvent::Start { session_id: session_id.into(), rater_id: rater_id.into() };
        self.apply(&e)?;
        Ok(e)
    }

    pub fn submit(&mut self, session_id: &str, judgment: Judgment) -> Result<SurveyEvent> {
        let e = SurveyEvent::Judgment { session_id: session_id.into(), judgment };
        self.apply(&e)?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::turing_scores;

    fn pools(n: usize) -> (Vec<String>, Vec<String>) {
        ((0..n).map(|i| format!("ffpe/{i}.png")).collect(), (0..n).map(|i| format!("ai/{i}.png")).collect())
    }

    fn ts(i: usize) -> String {
        format!("2024-01-01T00:{:02}:{:02}Z", i / 60, i % 60)
    }

    #[test]
    fn decks_are_balanced_and_seeded() {
        let (r, a) = pools(40);
        let d = build_deck(&r, &a, 25, 7).unwrap();
        assert_eq!(d.len(), 50);
        assert_eq!(d.items.iter().filter(|i| i.true_source == Source::RealFfpe).count(), 25);
        assert_eq!(build_deck(&r, &a, 25, 7).unwrap(), d);
        assert_ne!(build_deck(&r, &a, 25, 8).unwrap().items, d.items);
        let mut shuffled = r.clone();
        shuffled.reverse();
        assert_eq!(build_deck(&shuffled, &a, 25, 7).unwrap(), d);
        assert_eq!(
            build_deck(&r[..3], &a, 5, 1),
            Err(Error::InsufficientPatches { class: "real_ffpe", needed: 5, found: 3 })
        );
        let json = serde_json::to_string(&d.public_items()).unwrap();
        assert!(!json.contains("true_source") && !json.contains("ffpe/"));
    }

    #[test]
    fn one_way_sessions_and_export() {
        let (r, a) = pools(5);
        let deck = build_deck(&r, &a, 5, 3).unwrap();
        let mut book = SurveyBook::new(deck.clone()).unwrap();
        let mut log = vec![book.start("s1", "rater-a").unwrap()];
        assert!(book.start("s1", "rater-b").is_err());
        assert!(book.start("s2", " ").is_err());
        let judge = |i: usize| Judgment {
            item_id: deck.items[i].item_id.clone(),
            judged_source: deck.items[i].true_source,
            timestamp: ts(i),
        };
        assert!(book.submit("s1", judge(1)).is_err());
        log.push(book.submit("s1", judge(0)).unwrap());
        let before = book.session("s1").unwrap().clone();
        assert!(book.submit("s1", judge(0)).is_err());
        let earlier = Judgment { timestamp: "2023-12-31T00:00:00Z".into(), ..judge(1) };
        assert!(book.submit("s1", earlier).is_err());
        assert_eq!(book.session("s1").unwrap(), &before);
        let err = book.session("s1").unwrap().export(&deck).unwrap_err();
        assert!(format!("{err}").contains("9 of 10"));
        let view = serde_json::to_string(&book.session("s1").unwrap().view(&deck)).unwrap();
        assert!(!view.contains("true_source") && !view.contains("real_ffpe") && !view.contains("ai_ffpe"));
        for i in 1..10 {
            log.push(book.submit("s1", judge(i)).unwrap());
        }
        let s = book.session("s1").unwrap();
        assert!(s.view(&deck).complete && s.view(&deck).current.is_none());
        let export = s.export(&deck).unwrap();
        let scores = turing_scores(&export).unwrap();
        assert_eq!((scores.real_ffpe.f1, scores.ai_ffpe.f1), (1.0, 1.0));
        let replayed = SurveyBook::replay(deck.clone(), log).unwrap();
        assert_eq!(replayed, book);
    }

    #[test]
    fn raters_see_the_same_order() {
        let (r, a) = pools(25);
        let deck = build_deck(&r, &a, 25, 11).unwrap();
        let x = Session::start(&deck, "a", "r1").unwrap();
        let y = Session::start(&deck, "b", "r2").unwrap();
        assert_eq!(x.view(&deck).current, y.view(&deck).current);
        assert_eq!(x.view(&deck).total, 50);
    }
}
