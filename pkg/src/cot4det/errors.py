"""Exception hierarchy shared by every stage of the toolkit."""


class Cot4DetError(Exception):
    """Base class for all toolkit errors."""


class MalformedBox(Cot4DetError, ValueError):
    pass


class MissingField(Cot4DetError, KeyError):
    def __init__(self, field, index, source=None):
        self.field = field
        self.index = index
        self.source = source
        where = f" in {source}" if source else ""
        super().__init__(f"missing field {field!r} at record {index}{where}")

    def __str__(self):
        return self.args[0]


class UnknownCategory(Cot4DetError, KeyError):
    def __init__(self, category_id, annotation_id=None):
        self.category_id = category_id
        self.annotation_id = annotation_id
        msg = f"unknown category id {category_id}"
        if annotation_id is not None:
            msg += f" (annotation {annotation_id})"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class BandConflict(Cot4DetError, ValueError):
    pass


class UnknownGranularity(Cot4DetError, ValueError):
    pass


class EmptyImage(Cot4DetError, ValueError):
    pass


class EmptyCategoryList(Cot4DetError, ValueError):
    pass


class WeightSumMismatch(Cot4DetError, ValueError):
    pass


class UnknownTag(Cot4DetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NoParsableContent(Cot4DetError, ValueError):
    pass


class TooLarge(Cot4DetError, ValueError):
    pass


class TransportError(Cot4DetError):
    pass


class AuthError(Cot4DetError):
    pass


class ResponseShapeError(Cot4DetError):
    pass


class EvalAborted(Cot4DetError):
    """Raised when more than half of the images in a run failed."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
