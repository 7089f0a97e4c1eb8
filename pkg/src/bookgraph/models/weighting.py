"""Per-interaction loss weights from review metadata."""

VERIFIED_BONUS = 0.5
RATING_SLOPE = 0.1
RATING_PIVOT = 3.0


def interaction_weight(rating: float | None, verified: bool) -> float:
    """Loss weight for one review: ``1 + 0.5*verified + 0.1*max(rating - 3, 0)``.

    The rating term is dropped when the review carries no rating, so the
    weight is always at least 1.
    """
    w = 1.0 + (VERIFIED_BONUS if verified else 0.0)
    if rating is not None:
        w += RATING_SLOPE * max(rating - RATING_PIVOT, 0.0)
    return w
