use super::{
    validate_description, Action, DslError, GroundingQuery, ScrollDirection, TargetSpec, MAX_LINE_CHARS,
    MAX_TEXT_CHARS, VIEWPORT,
};

struct Cursor {
    chars: Vec<char>,
    pos: usize,
}

impl Cursor {
    fn new(text: &str) -> Result<Self, DslError> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() > MAX_LINE_CHARS {
            return Err(DslError::Syntax {
                offset: MAX_LINE_CHARS,
                message: format!("input longer than {MAX_LINE_CHARS} chars"),
            });
        }
        if let Some(i) = chars.iter().position(|&c| c == '\n' || c == '\r') {
            return Err(DslError::Syntax { offset: i, message: "input must be a single line".into() });
        }
        Ok(Self { chars, pos: 0 })
    }

    fn err(&self, message: impl Into<String>) -> DslError {
        DslError::Syntax { offset: self.pos, message: message.into() }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, lit: &str) -> bool {
        let n = lit.chars().count();
        if self.pos + n <= self.chars.len() && self.chars[self.pos..self.pos + n].iter().copied().eq(lit.chars()) {
            self.pos += n;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), DslError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{lit}`")))
        }
    }

    fn expect_end(&self) -> Result<(), DslError> {
        match self.peek() {
            None => Ok(()),
            Some(_) => Err(self.err("trailing characters")),
        }
    }

    /// Body of a double-quoted string; the opening quote is already consumed.
    fn string_body(&mut self) -> Result<String, DslError> {
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return Err(self.err("unterminated string")),
                Some('"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some('\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ ('"' | '\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return Err(self.err("invalid escape")),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    fn quoted(&mut self) -> Result<String, DslError> {
        self.expect("\"")?;
        self.string_body()
    }

    /// `0 | [1-9][0-9]*`, no sign.
    fn int(&mut self) -> Result<u64, DslError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits: String = self.chars[start..self.pos].iter().collect();
        if digits.is_empty() {
            return Err(DslError::Syntax { offset: start, message: "expected integer".into() });
        }
        if digits.len() > 1 && digits.starts_with('0') {
            return Err(DslError::Syntax { offset: start, message: "leading zero".into() });
        }
        digits
            .parse::<u64>()
            .ok()
            .filter(|v| *v <= u32::MAX as u64)
            .ok_or_else(|| DslError::Range(format!("integer {digits} too large")))
    }

    fn key(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_lowercase() || c == '_') {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }
}

#[derive(Default)]
struct Args {
    coordinates: Option<(u64, u64)>,
    description: Option<String>,
    element_id: Option<u64>,
    text: Option<String>,
    direction: Option<ScrollDirection>,
    amount: Option<u64>,
}

impl Args {
    fn target_count(&self) -> usize {
        self.coordinates.is_some() as usize + self.description.is_some() as usize + self.element_id.is_some() as usize
    }

    fn target(&self, offset: usize) -> Result<TargetSpec, DslError> {
        if self.target_count() != 1 {
            return Err(DslError::MissingTarget);
        }
        if let Some((x, y)) = self.coordinates {
            if x >= VIEWPORT as u64 || y >= VIEWPORT as u64 {
                return Err(DslError::Range(format!("coordinate [{x},{y}] outside [0,{VIEWPORT})")));
            }
            return Ok(TargetSpec::Grounded { x: x as u32, y: y as u32 });
        }
        if let Some(d) = &self.description {
            validate_description(d, offset)?;
            return Ok(TargetSpec::Descriptive(d.clone()));
        }
        Ok(TargetSpec::ElementRef(self.element_id.expect("one target present") as u32))
    }
}

fn parse_args(cur: &mut Cursor) -> Result<Args, DslError> {
    let mut args = Args::default();
    loop {
        if cur.eat(")") {
            return Ok(args);
        }
        cur.expect(", ")?;
        let key_at = cur.pos;
        let key = cur.key();
        cur.expect("=")?;
        let dup = || DslError::Syntax { offset: key_at, message: format!("duplicate argument `{key}`") };
        match key.as_str() {
            "element_coordinates" => {
                cur.expect("[")?;
                let x = cur.int()?;
                cur.expect(",")?;
                let y = cur.int()?;
                cur.expect("]")?;
                if args.coordinates.replace((x, y)).is_some() {
                    return Err(dup());
                }
            }
            "element_description" => {
                if args.description.replace(cur.quoted()?).is_some() {
                    return Err(dup());
                }
            }
            "element_id" => {
                if args.element_id.replace(cur.int()?).is_some() {
                    return Err(dup());
                }
            }
            "text" => {
                if args.text.replace(cur.quoted()?).is_some() {
                    return Err(dup());
                }
            }
            "direction" => {
                let at = cur.pos;
                let d = match cur.quoted()?.as_str() {
                    "up" => ScrollDirection::Up,
                    "down" => ScrollDirection::Down,
                    other => return Err(DslError::Syntax { offset: at, message: format!("bad direction `{other}`") }),
                };
                if args.direction.replace(d).is_some() {
                    return Err(dup());
                }
            }
            "amount" => {
                if args.amount.replace(cur.int()?).is_some() {
                    return Err(dup());
                }
            }
            _ => return Err(DslError::Syntax { offset: key_at, message: format!("unknown argument `{key}`") }),
        }
    }
}

fn unexpected(offset: usize, what: &str) -> DslError {
    DslError::Syntax { offset, message: format!("unexpected argument `{what}`") }
}

/// Parses one line of the action grammar.
pub fn parse_action(text: &str) -> Result<Action, DslError> {
    let mut cur = Cursor::new(text)?;
    if cur.eat("finish(") {
        let answer = if cur.eat(")") {
            None
        } else {
            cur.expect("answer=")?;
            let a = cur.quoted()?;
            cur.expect(")")?;
            Some(a)
        };
        cur.expect_end()?;
        return Ok(Action::Finish { answer });
    }

    cur.expect("do(action=\"")?;
    let mut name = String::new();
    loop {
        match cur.peek() {
            None => return Err(cur.err("unterminated action name")),
            Some('"') => {
                cur.pos += 1;
                break;
            }
            Some(c) => {
                name.push(c);
                cur.pos += 1;
            }
        }
    }
    if !matches!(name.as_str(), "Click" | "Input" | "Scroll" | "Back") {
        return Err(DslError::UnknownAction(name));
    }
    let args_at = cur.pos;
    let args = parse_args(&mut cur)?;
    cur.expect_end()?;

    match name.as_str() {
        "Click" => {
            if args.text.is_some() {
                return Err(unexpected(args_at, "text"));
            }
            if args.direction.is_some() || args.amount.is_some() {
                return Err(unexpected(args_at, "direction/amount"));
            }
            Ok(Action::Click(args.target(args_at)?))
        }
        "Input" => {
            if args.direction.is_some() || args.amount.is_some() {
                return Err(unexpected(args_at, "direction/amount"));
            }
            let target = args.target(args_at)?;
            let text = args
                .text
                .clone()
                .ok_or_else(|| DslError::Syntax { offset: args_at, message: "Input requires `text`".into() })?;
            if text.chars().count() > MAX_TEXT_CHARS {
                return Err(DslError::Range(format!("text longer than {MAX_TEXT_CHARS} chars")));
            }
            Ok(Action::Input { target, text })
        }
        "Scroll" => {
            if args.target_count() > 0 || args.text.is_some() {
                return Err(unexpected(args_at, "target/text"));
            }
            let direction = args
                .direction
                .ok_or_else(|| DslError::Syntax { offset: args_at, message: "Scroll requires `direction`".into() })?;
            let amount = args
                .amount
                .ok_or_else(|| DslError::Syntax { offset: args_at, message: "Scroll requires `amount`".into() })?;
            if amount == 0 {
                return Err(DslError::Range("scroll amount must be positive".into()));
            }
            Ok(Action::Scroll { direction, amount: amount as u32 })
        }
        "Back" => {
            if args.target_count() > 0 || args.text.is_some() || args.direction.is_some() || args.amount.is_some() {
                return Err(unexpected(args_at, "any"));
            }
            Ok(Action::Back)
        }
        _ => unreachable!("action name checked above"),
    }
}

/// Parses `find_coordinates_by_instruction("...")`.
pub fn parse_grounding_query(text: &str) -> Result<GroundingQuery, DslError> {
    let mut cur = Cursor::new(text)?;
    cur.expect("find_coordinates_by_instruction(\"")?;
    let at = cur.pos;
    let body = cur.string_body()?;
    cur.expect(")")?;
    cur.expect_end()?;
    validate_description(&body, at)?;
    Ok(GroundingQuery(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grounded(x: u32, y: u32) -> TargetSpec {
        TargetSpec::Grounded { x, y }
    }

    #[test]
    fn coordinates_click() {
        let a = parse_action(r#"do(action="Click", element_coordinates=[823,684])"#).unwrap();
        assert_eq!(a, Action::Click(grounded(823, 684)));
    }

    #[test]
    fn description_click() {
        let a = parse_action(r#"do(action="Click", element_description="the 'Submit' button on the bottom right")"#)
            .unwrap();
        assert_eq!(a, Action::Click(TargetSpec::Descriptive("the 'Submit' button on the bottom right".into())));
    }

    #[test]
    fn click_without_target() {
        assert_eq!(parse_action(r#"do(action="Click")"#), Err(DslError::MissingTarget));
        assert_eq!(
            parse_action(r#"do(action="Click", element_id=3, element_coordinates=[1,2])"#),
            Err(DslError::MissingTarget)
        );
    }

    #[test]
    fn unknown_action_name() {
        assert_eq!(parse_action(r#"do(action="Hover", element_id=1)"#), Err(DslError::UnknownAction("Hover".into())));
    }

    #[test]
    fn coordinate_range() {
        assert!(matches!(parse_action(r#"do(action="Click", element_coordinates=[1000,5])"#), Err(DslError::Range(_))));
        assert!(parse_action(r#"do(action="Click", element_coordinates=[999,0])"#).is_ok());
    }

    #[test]
    fn argument_order_is_free() {
        let a = parse_action(r#"do(action="Input", text="latte", element_id=4)"#).unwrap();
        assert_eq!(a.render(), r#"do(action="Input", element_id=4, text="latte")"#);
    }

    #[test]
    fn scroll_and_finish() {
        assert_eq!(
            parse_action(r#"do(action="Scroll", direction="down", amount=2)"#).unwrap(),
            Action::Scroll { direction: ScrollDirection::Down, amount: 2 }
        );
        assert!(matches!(parse_action(r#"do(action="Scroll", direction="down", amount=0)"#), Err(DslError::Range(_))));
        assert_eq!(parse_action("finish()").unwrap(), Action::Finish { answer: None });
        assert_eq!(parse_action(r#"finish(answer="42")"#).unwrap(), Action::Finish { answer: Some("42".into()) });
    }

    #[test]
    fn rejects_noise() {
        for bad in [
            "",
            "click the thing",
            r#"do(action="Click", element_id=01)"#,
            r#"do(action="Click",element_id=1)"#,
            r#"do(action="Click", element_id=1) "#,
            r#"do(action="Click", element_description="")"#,
            r#"do(action="Click", element_description="   ")"#,
            r#"do(action="Click", element_description="a\b")"#,
            r#"do(action="Back", text="x")"#,
            r#"do(action="Input", element_id=1)"#,
            "finish(answer=)",
        ] {
            assert!(parse_action(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn grounding_queries() {
        let q = parse_grounding_query(r#"find_coordinates_by_instruction("the 'Submit' button on the bottom right")"#)
            .unwrap();
        assert_eq!(q.description(), "the 'Submit' button on the bottom right");
        assert!(matches!(
            parse_grounding_query(r#"find_coordinates_by_instruction("")"#),
            Err(DslError::Syntax { .. })
        ));
        let q = parse_grounding_query(r#"find_coordinates_by_instruction("a \"quoted\" label")"#).unwrap();
        assert_eq!(q.description(), r#"a "quoted" label"#);
    }

    #[test]
    fn multiline_rejected() {
        assert!(parse_action("do(action=\"Back\")\n").is_err());
    }
}
