use super::{Fact, FdrTask, Operator, PartialState, State, Variable};
#[cfg(test)]
use super::VarId;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SasError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unsupported feature: {feature}")]
    Unsupported { line: usize, feature: String },
}

struct Cursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor { lines: text.lines().map(str::trim_end).collect(), pos: 0 }
    }

    fn line_no(&self) -> usize {
        self.pos + 1
    }

    fn err(&self, msg: impl Into<String>) -> SasError {
        SasError::Parse { line: self.line_no(), msg: msg.into() }
    }

    fn next(&mut self) -> Result<&'a str, SasError> {
        let line = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(line)
    }

    fn expect(&mut self, word: &str) -> Result<(), SasError> {
        let line = self.next()?;
        if line.trim() != word {
            self.pos -= 1;
            return Err(self.err(format!("expected `{word}`, found `{line}`")));
        }
        Ok(())
    }

    fn int<T: std::str::FromStr>(&mut self) -> Result<T, SasError> {
        let line = self.next()?;
        line.trim().parse().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected a number, found `{line}`"))
        })
    }

    fn ints(&mut self, n: usize) -> Result<Vec<i64>, SasError> {
        let line = self.next()?;
        let vals: Result<Vec<i64>, _> = line.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == n => Ok(v),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected {n} numbers, found `{line}`")))
            }
        }
    }

    fn at_end(&self) -> bool {
        self.lines[self.pos..].iter().all(|l| l.trim().is_empty())
    }
}

fn fact(c: &Cursor, vars: &[Variable], var: i64, val: i64) -> Result<Fact, SasError> {
    let v = usize::try_from(var)
        .ok()
        .filter(|&v| v < vars.len())
        .ok_or_else(|| SasError::Parse { line: c.pos, msg: format!("unknown variable {var}") })?;
    let d = usize::try_from(val)
        .ok()
        .filter(|&d| d < vars[v].values.len())
        .ok_or_else(|| SasError::Parse {
            line: c.pos,
            msg: format!("value {val} out of range for variable {v}"),
        })?;
    Ok(Fact::new(v, d))
}

/// Parses a translator output file (format version 3).
pub fn parse_sas(text: &str) -> Result<FdrTask, SasError> {
    let mut c = Cursor::new(text);
    c.expect("begin_version")?;
    let version: u32 = c.int()?;
    if version != 3 {
        c.pos -= 1;
        return Err(SasError::Unsupported {
            line: c.line_no(),
            feature: format!("file format version {version}"),
        });
    }
    c.expect("end_version")?;
    c.expect("begin_metric")?;
    let metric: u32 = c.int()?;
    c.expect("end_metric")?;

    let nvars: usize = c.int()?;
    let mut variables = Vec::with_capacity(nvars);
    for _ in 0..nvars {
        c.expect("begin_variable")?;
        let name = c.next()?.to_string();
        let axiom_layer: i32 = c.int()?;
        if axiom_layer != -1 {
            return Err(SasError::Unsupported {
                line: c.pos,
                feature: format!("derived variable `{name}`"),
            });
        }
        let range: usize = c.int()?;
        if range == 0 {
            return Err(c.err(format!("variable `{name}` has an empty domain")));
        }
        let values = (0..range).map(|_| c.next().map(str::to_string)).collect::<Result<_, _>>()?;
        c.expect("end_variable")?;
        variables.push(Variable { name, axiom_layer, values });
    }

    let ngroups: usize = c.int()?;
    let mut mutex_groups = Vec::with_capacity(ngroups);
    for _ in 0..ngroups {
        c.expect("begin_mutex_group")?;
        let n: usize = c.int()?;
        let mut group = Vec::with_capacity(n);
        for _ in 0..n {
            let p = c.ints(2)?;
            group.push(fact(&c, &variables, p[0], p[1])?);
        }
        c.expect("end_mutex_group")?;
        mutex_groups.push(group);
    }

    c.expect("begin_state")?;
    let mut init = Vec::with_capacity(nvars);
    for v in 0..nvars {
        let d: i64 = c.int()?;
        init.push(fact(&c, &variables, v as i64, d)?.val);
    }
    c.expect("end_state")?;

    c.expect("begin_goal")?;
    let ngoal: usize = c.int()?;
    let mut goal = PartialState::new();
    for _ in 0..ngoal {
        let p = c.ints(2)?;
        let f = fact(&c, &variables, p[0], p[1])?;
        if goal.has_var(f.var) {
            return Err(c.err("goal assigns a variable twice"));
        }
        goal.set(f.var, f.val);
    }
    c.expect("end_goal")?;

    let nops: usize = c.int()?;
    let mut operators = Vec::with_capacity(nops);
    for _ in 0..nops {
        c.expect("begin_operator")?;
        let name = c.next()?.trim().to_string();
        let mut pre = PartialState::new();
        let mut eff = PartialState::new();
        let nprevail: usize = c.int()?;
        for _ in 0..nprevail {
            let p = c.ints(2)?;
            let f = fact(&c, &variables, p[0], p[1])?;
            pre.set(f.var, f.val);
        }
        let neff: usize = c.int()?;
        for _ in 0..neff {
            let line = c.next()?;
            let nums: Vec<i64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| SasError::Parse { line: c.pos, msg: format!("bad effect `{line}`") })?;
            if nums.first().copied().unwrap_or(0) != 0 {
                return Err(SasError::Unsupported {
                    line: c.pos,
                    feature: format!("conditional effect in operator `{name}`"),
                });
            }
            if nums.len() != 4 {
                return Err(SasError::Parse { line: c.pos, msg: format!("bad effect `{line}`") });
            }
            let post = fact(&c, &variables, nums[1], nums[3])?;
            if nums[2] != -1 {
                let p = fact(&c, &variables, nums[1], nums[2])?;
                pre.set(p.var, p.val);
            }
            if eff.has_var(post.var) {
                return Err(SasError::Parse {
                    line: c.pos,
                    msg: format!("operator `{name}` assigns a variable twice"),
                });
            }
            eff.set(post.var, post.val);
        }
        let cost: u64 = c.int()?;
        c.expect("end_operator")?;
        if eff.is_empty() {
            return Err(c.err(format!("operator `{name}` has no effect")));
        }
        operators.push(Operator { name, pre, eff, cost });
    }

    let naxioms: usize = c.int()?;
    if naxioms > 0 {
        return Err(SasError::Unsupported { line: c.pos, feature: "axioms".into() });
    }
    if !c.at_end() {
        return Err(c.err("trailing content after axiom section"));
    }

    Ok(FdrTask {
        variables,
        mutex_groups,
        operators,
        init: State(init),
        goal,
        use_costs: metric != 0,
    })
}

/// Writes a task in the translator's format; inverse of [`parse_sas`].
pub fn write_sas(task: &FdrTask) -> String {
    let mut out = String::new();
    out.push_str("begin_version\n3\nend_version\n");
    let _ = writeln!(out, "begin_metric\n{}\nend_metric", u8::from(task.use_costs));
    let _ = writeln!(out, "{}", task.variables.len());
    for v in &task.variables {
        let _ = writeln!(out, "begin_variable\n{}\n{}\n{}", v.name, v.axiom_layer, v.values.len());
        for val in &v.values {
            let _ = writeln!(out, "{val}");
        }
        out.push_str("end_variable\n");
    }
    let _ = writeln!(out, "{}", task.mutex_groups.len());
    for g in &task.mutex_groups {
        let _ = writeln!(out, "begin_mutex_group\n{}", g.len());
        for f in g {
            let _ = writeln!(out, "{} {}", f.var.0, f.val);
        }
        out.push_str("end_mutex_group\n");
    }
    out.push_str("begin_state\n");
    for d in &task.init.0 {
        let _ = writeln!(out, "{d}");
    }
    out.push_str("end_state\n");
    let _ = writeln!(out, "begin_goal\n{}", task.goal.len());
    for f in task.goal.iter() {
        let _ = writeln!(out, "{} {}", f.var.0, f.val);
    }
    out.push_str("end_goal\n");
    let _ = writeln!(out, "{}", task.operators.len());
    for op in &task.operators {
        let _ = writeln!(out, "begin_operator\n{}", op.name);
        let prevail: Vec<Fact> = op.pre.iter().filter(|f| !op.eff.has_var(f.var)).collect();
        let _ = writeln!(out, "{}", prevail.len());
        for f in prevail {
            let _ = writeln!(out, "{} {}", f.var.0, f.val);
        }
        let _ = writeln!(out, "{}", op.eff.len());
        for f in op.eff.iter() {
            let pre = op.pre.get(f.var).map_or(-1, |d| d as i64);
            let _ = writeln!(out, "0 {} {} {}", f.var.0, pre, f.val);
        }
        let _ = writeln!(out, "{}\nend_operator", op.cost);
    }
    out.push_str("0\n");
    out
}
