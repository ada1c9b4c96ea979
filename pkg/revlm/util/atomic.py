import os
import tempfile


def atomic_replace(filename, data):
    """Write data (bytes) to filename so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(filename))
    with tempfile.NamedTemporaryFile(mode='wb', dir=directory, delete=False) as f:
        try:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        except BaseException:
            os.unlink(f.name)
            raise
    os.replace(f.name, filename)
