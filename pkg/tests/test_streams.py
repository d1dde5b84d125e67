import pytest

from codestream.streams import count, just, stream, ConcatStream, SliceStream, Stream


@stream
def countdown(n):
    while n > 0:
        yield n
        n -= 1
    return 'done'


def test_generator_streams_replay():
    s = countdown(3)
    assert list(s) == [3, 2, 1]
    assert list(s) == [3, 2, 1]


def test_concat_and_flattening():
    s = countdown(2) >> just(0) >> countdown(1)
    assert list(s) == [2, 1, 0, 1]
    assert isinstance(s, ConcatStream)
    assert len(s.streams) == 3


def test_indexing_runs_prefix():
    assert countdown(5)[0] == 5
    assert countdown(5)[3] == 2
    with pytest.raises(IndexError):
        countdown(2)[2]
    with pytest.raises(TypeError):
        countdown(2)['a']


def test_slicing():
    assert list(count()[2:5]) == [2, 3, 4]
    assert list(countdown(7)[::3]) == [7, 4, 1]
    assert list(countdown(3)[5:]) == []
    with pytest.raises(ValueError):
        SliceStream(countdown(3), None, None, 0)
    with pytest.raises(ValueError):
        countdown(3)[-1:]


def test_last():
    assert countdown(4).last() == 1
    assert countdown(0).last('nothing') == 'nothing'
    assert isinstance(stream([1, 2]), Stream)
    with pytest.raises(ValueError):
        stream(3)
