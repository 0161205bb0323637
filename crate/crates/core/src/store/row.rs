//! Rows, schemas, and their canonical encodings.

use crate::codec::{CodecError, Dec, Enc};
use crate::hash::Hash256;
use crate::store::StoreError;

/// Primary keys are arbitrary non-empty byte strings ordered
/// lexicographically.
pub type Key = Vec<u8>;

/// Declared shape of a table: a name and an ordered field list. Rows may
/// populate any subset of the fields but never anything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: String,
    pub fields: Vec<String>,
}

impl TableSchema {
    pub fn new(name: &str, fields: &[&str]) -> Result<TableSchema, StoreError> {
        if name.is_empty() {
            return Err(StoreError::InvalidName(name.to_string()));
        }
        if fields.is_empty() {
            return Err(StoreError::InvalidSchema("no fields".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in fields {
            if f.is_empty() || !seen.insert(*f) {
                return Err(StoreError::InvalidSchema(format!("bad field {f:?}")));
            }
        }
        Ok(TableSchema {
            name: name.to_string(),
            fields: fields.iter().map(|f| f.to_string()).collect(),
        })
    }

    pub fn field_index(&self, field: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == field)
    }
}

/// One table row. Fields are stored in schema declaration order, so two
/// rows with the same content always have the same encoding no matter how
/// they were built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub key: Key,
    fields: Vec<(String, Vec<u8>)>,
}

impl Row {
    /// Build a row from unordered field/value pairs, normalizing to schema
    /// order. Unknown or duplicate fields and empty keys are rejected.
    pub fn normalized(
        schema: &TableSchema,
        key: &[u8],
        fields: &[(&str, &[u8])],
    ) -> Result<Row, StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        let mut indexed: Vec<(usize, &str, &[u8])> = Vec::with_capacity(fields.len());
        for (name, value) in fields {
            let idx = schema.field_index(name).ok_or_else(|| StoreError::NoSuchField {
                table: schema.name.clone(),
                field: name.to_string(),
            })?;
            if indexed.iter().any(|(i, _, _)| *i == idx) {
                return Err(StoreError::InvalidSchema(format!("duplicate field {name:?}")));
            }
            indexed.push((idx, name, value));
        }
        indexed.sort_by_key(|(i, _, _)| *i);
        Ok(Row {
            key: key.to_vec(),
            fields: indexed
                .into_iter()
                .map(|(_, n, v)| (n.to_string(), v.to_vec()))
                .collect(),
        })
    }

    pub fn get(&self, field: &str) -> Option<&[u8]> {
        self.fields
            .iter()
            .find(|(n, _)| n == field)
            .map(|(_, v)| v.as_slice())
    }

    pub fn fields(&self) -> &[(String, Vec<u8>)] {
        &self.fields
    }

    /// Replace one field's value in place. The row does not carry its
    /// table name, so the error reports the field alone.
    pub fn set(&mut self, field: &str, value: &[u8]) -> Result<(), StoreError> {
        match self.fields.iter_mut().find(|(n, _)| n == field) {
            Some((_, v)) => {
                *v = value.to_vec();
                Ok(())
            }
            None => Err(StoreError::NoSuchField {
                table: String::new(),
                field: field.to_string(),
            }),
        }
    }

    /// Injective byte encoding; the unit of row hashing, state dumps, and
    /// repair transfer.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::new();
        e.bytes(&self.key).list(&self.fields, |e, (n, v)| {
            e.str(n).bytes(v);
        });
        e.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Row, CodecError> {
        let mut d = Dec::new(buf);
        let key = d.bytes()?.to_vec();
        let fields = d.list(|d| {
            let n = d.str()?;
            let v = d.bytes()?.to_vec();
            Ok((n, v))
        })?;
        d.done()?;
        if key.is_empty() {
            return Err(CodecError::Malformed("empty row key"));
        }
        Ok(Row { key, fields })
    }

    /// Hash of the canonical encoding; the row's contribution to its leaf.
    pub fn content_hash(&self) -> Hash256 {
        Hash256::of(&self.canonical_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> TableSchema {
        TableSchema::new("t", &["a", "b", "c"]).unwrap()
    }

    #[test]
    fn field_order_is_normalized_to_schema_order() {
        let s = schema();
        let r1 = Row::normalized(&s, b"k", &[("c", b"3"), ("a", b"1")]).unwrap();
        let r2 = Row::normalized(&s, b"k", &[("a", b"1"), ("c", b"3")]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.canonical_bytes(), r2.canonical_bytes());
        assert_eq!(r1.fields()[0].0, "a");
        assert_eq!(r1.fields()[1].0, "c");
    }

    #[test]
    fn unknown_and_duplicate_fields_are_rejected() {
        let s = schema();
        assert!(matches!(
            Row::normalized(&s, b"k", &[("zz", b"1")]),
            Err(StoreError::NoSuchField { .. })
        ));
        assert!(Row::normalized(&s, b"k", &[("a", b"1"), ("a", b"2")]).is_err());
        assert!(matches!(Row::normalized(&s, b"", &[("a", b"1")]), Err(StoreError::EmptyKey)));
    }

    #[test]
    fn canonical_encoding_roundtrips() {
        let s = schema();
        let r = Row::normalized(&s, b"key1", &[("a", b"x"), ("b", b"")]).unwrap();
        let back = Row::decode(&r.canonical_bytes()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn content_hash_tracks_any_field_change() {
        let s = schema();
        let r1 = Row::normalized(&s, b"k", &[("a", b"1")]).unwrap();
        let r2 = Row::normalized(&s, b"k", &[("a", b"2")]).unwrap();
        let r3 = Row::normalized(&s, b"k", &[("b", b"1")]).unwrap();
        assert_ne!(r1.content_hash(), r2.content_hash());
        assert_ne!(r1.content_hash(), r3.content_hash());
    }

    #[test]
    fn schema_rejects_duplicates_and_empties() {
        assert!(TableSchema::new("", &["a"]).is_err());
        assert!(TableSchema::new("t", &[]).is_err());
        assert!(TableSchema::new("t", &["a", "a"]).is_err());
        assert!(TableSchema::new("t", &["a", ""]).is_err());
    }
}
