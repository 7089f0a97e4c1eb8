"""Top-N book recommendation over a multi-entity heterogeneous book graph."""

from bookgraph.graph import (
    Author,
    Book,
    BookGraph,
    Category,
    EntityId,
    EntityKind,
    Interaction,
    Publisher,
    Relation,
    RelationEdge,
    Review,
    User,
    build_interactions,
    neighbors,
    validate_graph,
)

__version__ = "0.1.0"

__all__ = [
    "Author",
    "Book",
    "BookGraph",
    "Category",
    "EntityId",
    "EntityKind",
    "Interaction",
    "Publisher",
    "Relation",
    "RelationEdge",
    "Review",
    "User",
    "build_interactions",
    "neighbors",
    "validate_graph",
]
