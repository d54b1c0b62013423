import abc
import csv
import io
import json
import logging
import os
import tempfile

logger = logging.getLogger(__name__)


def atomic_write(path, content, mode='w'):
    """
    Writes the content to a temporary file in the target directory then renames it over the target so readers never
    see a partial file.
    :param path: the target file, intermediate dirs will be created as necessary.
    :param content: str or bytes.
    :param mode: 'w' or 'wb'.
    """
    target_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(target_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target_dir, prefix='.' + os.path.basename(path), suffix='.tmp')
    try:
        with os.fdopen(fd, mode, **({} if 'b' in mode else {'newline': ''})) as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.debug(f"Wrote {path}")


def write_csv(path, header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    if header:
        writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buffer.getvalue())


def write_json(path, doc):
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + '\n')


class DataHandler:
    """
    A simple interface to define the expected behaviour of something that handles data.
    """

    @abc.abstractmethod
    def handle(self, data):
        """
        A callback for handling some data.
        :param data: a list of dicts or lists, one per row.
        """
        pass

    @abc.abstractmethod
    def on_failure(self, event_time, message):
        """
        Callback for handling failures.
        :param event_time: the (simulated) time of the event.
        :param message: the message.
        """
        pass


class Discard(DataHandler):
    """
    a data handler that simply throws the data away
    """

    def handle(self, data):
        pass

    def on_failure(self, event_time, message):
        pass


class CSVLogger(DataHandler):
    """
    A handler which collects the received data and writes it as CSV to target/name when closed. The header comes from
    the keys of the first dict received. Failures are collected separately as (time, message) pairs.
    """

    def __init__(self, name, target):
        self.name = name
        self.target = target
        self.__rows = []
        self.__header = None
        self.failures = []

    @property
    def path(self):
        return os.path.join(self.target, self.name)

    def handle(self, data):
        for datum in data:
            if isinstance(datum, dict):
                if self.__header is None:
                    self.__header = list(datum.keys())
                self.__rows.append([datum.get(k) for k in self.__header])
            elif isinstance(datum, (list, tuple)):
                self.__rows.append(list(datum))

    def on_failure(self, event_time, message):
        self.failures.append((event_time, message))

    def close(self):
        """
        Writes everything received so far.
        :return: the path written to.
        """
        write_csv(self.path, self.__header, self.__rows)
        return self.path
