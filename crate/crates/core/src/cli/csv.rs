//! Minimal CSV tables with a versioned schema comment.

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

impl CsvTable {
    pub fn new(schema: &str, columns: &[&str]) -> Self {
        Self { schema: schema.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width for {}", self.schema);
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = format!("# cgx {} schema v{SCHEMA_VERSION}: {}\n", self.schema, self.columns.join(","));
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|f| escape(f)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    /// Column values by name.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn column_f64(&self, name: &str) -> Option<Vec<f64>> {
        self.column(name)?.iter().map(|v| v.parse().ok()).collect()
    }
}

/// Parses a table produced by [`CsvTable::render`] (quoted fields included).
pub fn parse_csv(text: &str) -> Option<CsvTable> {
    let mut lines = text.lines();
    let first = lines.next()?;
    let schema = first.strip_prefix("# cgx ")?.split(" schema").next()?.to_string();
    let columns: Vec<String> = split(lines.next()?);
    let rows = lines.filter(|l| !l.is_empty()).map(split).collect();
    Some(CsvTable { schema, columns, rows })
}

fn split(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}
