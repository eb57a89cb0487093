use super::{Flag, HiddenProperty, Property, Query, QueryError, Relation};
use crate::hashing::SaltedHash;

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

enum Keyword {
    Property(Property),
    Hidden(HiddenProperty),
    Flag(Flag),
    Relation(Relation),
    Nth,
    Conj,
}

fn keyword(name: &str) -> Option<Keyword> {
    Some(match name {
        "class" => Keyword::Property(Property::Class),
        "text" => Keyword::Property(Property::Text),
        "content-desc" => Keyword::Property(Property::ContentDesc),
        "view-id" => Keyword::Property(Property::ViewId),
        "hidden-text" => Keyword::Hidden(HiddenProperty::Text),
        "hidden-content-desc" => Keyword::Hidden(HiddenProperty::ContentDesc),
        "clickable" => Keyword::Flag(Flag::Clickable),
        "scrollable" => Keyword::Flag(Flag::Scrollable),
        "focused" => Keyword::Flag(Flag::Focused),
        "enabled" => Keyword::Flag(Flag::Enabled),
        "parent" => Keyword::Relation(Relation::Parent),
        "child" => Keyword::Relation(Relation::Child),
        "above" => Keyword::Relation(Relation::Above),
        "below" => Keyword::Relation(Relation::Below),
        "left" => Keyword::Relation(Relation::Left),
        "right" => Keyword::Relation(Relation::Right),
        "nth" => Keyword::Nth,
        "conj" => Keyword::Conj,
        _ => return None,
    })
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> QueryError {
        QueryError::Syntax {
            pos: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), QueryError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(c) => Err(self.err(format!("expected `{want}`, found `{c}`"))),
            None => Err(self.err(format!("expected `{want}`, found end of input"))),
        }
    }

    fn word(&mut self) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '-' {
                self.pos += 1;
            } else {
                break;
            }
        }
        &self.src[start..self.pos]
    }

    fn literal(&mut self) -> Result<String, QueryError> {
        self.skip_ws();
        if self.peek() != Some('"') {
            return Err(self.err("expected a string literal"));
        }
        self.pos += 1;
        let mut out = String::new();
        loop {
            let Some(c) = self.peek() else {
                return Err(self.err("unterminated string literal"));
            };
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => match self.peek() {
                    Some(e @ ('"' | '\\')) => {
                        self.pos += 1;
                        out.push(e);
                    }
                    _ => return Err(self.err("invalid escape; only \\\" and \\\\ are allowed")),
                },
                other => out.push(other),
            }
        }
    }

    fn query(&mut self) -> Result<Query, QueryError> {
        self.expect('(')?;
        let kw_pos = {
            self.skip_ws();
            self.pos
        };
        let name = self.word();
        if name.is_empty() {
            return Err(self.err("expected a keyword"));
        }
        let kw = keyword(name).ok_or_else(|| QueryError::UnknownPredicate {
            name: name.to_owned(),
            pos: kw_pos,
        })?;
        let q = match kw {
            Keyword::Property(p) => Query::Property(p, self.literal()?),
            Keyword::Hidden(p) => {
                self.skip_ws();
                let at = self.pos;
                let hex = self.literal()?;
                let hash = SaltedHash::parse(&hex).map_err(|_| QueryError::InvalidHash { pos: at })?;
                Query::Hidden(p, hash)
            }
            Keyword::Flag(f) => Query::Flag(f),
            Keyword::Relation(r) => Query::Rel(r, Box::new(self.query()?)),
            Keyword::Nth => {
                self.skip_ws();
                let at = self.pos;
                let digits = self.word();
                let k: u32 = digits
                    .parse()
                    .map_err(|_| QueryError::Syntax {
                        pos: at,
                        message: format!("expected an index, found `{digits}`"),
                    })?;
                if k == 0 {
                    return Err(QueryError::ZeroIndex { pos: at });
                }
                Query::Nth(k, Box::new(self.query()?))
            }
            Keyword::Conj => {
                let mut parts = Vec::new();
                loop {
                    self.skip_ws();
                    if self.peek() != Some('(') {
                        break;
                    }
                    parts.push(self.query()?);
                }
                if parts.len() < 2 {
                    return Err(self.err("conj needs at least two sub-queries"));
                }
                Query::Conj(parts)
            }
        };
        self.expect(')')?;
        Ok(q)
    }
}

/// Parses the textual query grammar.
pub fn parse_query(text: &str) -> Result<Query, QueryError> {
    let mut p = Parser { src: text, pos: 0 };
    let q = p.query()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.err("trailing input after query"));
    }
    Ok(q)
}
